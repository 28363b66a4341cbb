"""
Object extraction: thresholding, 4-connected components, masked crops and warping.
"""
from dataclasses import dataclass
from typing import List, Literal, Set, Tuple, Union

import numpy as np
from scipy import ndimage

from core.logging import get_logger
from core.models.micrograph import MATRIX_CLASS, MicrographSample

logger = get_logger("imgdata")

DEFAULT_MIN_OBJECT_AREA = 30
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class ObjectRegion:
    """
    One 4-connected component of the constituent mask.

    Pixel coordinates are stored as parallel row/col arrays in raster order.
    """
    id: int
    rows: np.ndarray
    cols: np.ndarray
    bbox: Tuple[int, int, int, int]  # (top, left, height, width)

    @property
    def area(self) -> int:
        return int(self.rows.size)

    @property
    def pixels(self) -> Set[Tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def check_bounds(self, shape: Tuple[int, int]) -> None:
        top, left, height, width = self.bbox
        if top < 0 or left < 0 or top + height > shape[0] or left + width > shape[1]:
            raise ValueError(f"region {self.id} bbox {self.bbox} outside raster of shape {tuple(shape)}")

    def local_mask(self) -> np.ndarray:
        """Boolean (height, width) mask of the region inside its bbox."""
        top, left, height, width = self.bbox
        mask = np.zeros((height, width), dtype=bool)
        mask[self.rows - top, self.cols - left] = True
        return mask


def threshold_mask(
    image: np.ndarray,
    threshold: int,
    polarity: Literal["dark", "bright"] = "dark",
) -> np.ndarray:
    """
    Binary constituent mask.

    "dark" marks pixels with intensity <= threshold (dark constituents on a bright
    matrix); "bright" marks pixels > threshold.
    """
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be in 0..255, got {threshold}")
    image = np.asarray(image)
    if polarity == "dark":
        return image <= threshold
    if polarity == "bright":
        return image > threshold
    raise ValueError(f"unknown mask polarity '{polarity}'")


def connected_components(mask: np.ndarray, min_object_area: int = DEFAULT_MIN_OBJECT_AREA) -> List[ObjectRegion]:
    """
    4-connected foreground components with area >= min_object_area.

    Ids run 1..k in raster order of each region's first pixel.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 0:
        return []

    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")  # raster order inside each label
    counts = np.bincount(flat, minlength=n + 1)
    bounds = np.cumsum(counts)
    width = mask.shape[1]

    regions = []
    for lab in range(1, n + 1):
        area = counts[lab]
        if area < min_object_area:
            continue
        idx = order[bounds[lab - 1]:bounds[lab]]
        rows, cols = np.divmod(idx, width)
        regions.append((int(idx[0]), rows, cols))

    regions.sort(key=lambda item: item[0])
    out = []
    for new_id, (_, rows, cols) in enumerate(regions, start=1):
        top, left = int(rows.min()), int(cols.min())
        bbox = (top, left, int(rows.max()) - top + 1, int(cols.max()) - left + 1)
        out.append(ObjectRegion(id=new_id, rows=rows, cols=cols, bbox=bbox))

    discarded = n - len(out)
    if discarded:
        logger.debug("Discarded small components", extra={"discarded": discarded, "min_area": min_object_area})
    return out


def region_truth(label_map: np.ndarray, region: ObjectRegion) -> int:
    """Majority non-matrix label inside a region (lowest class on ties; matrix if none)."""
    region.check_bounds(label_map.shape)
    values = np.asarray(label_map)[region.rows, region.cols].astype(np.int64)
    values = values[values != MATRIX_CLASS]
    if values.size == 0:
        return MATRIX_CLASS
    return int(np.bincount(values).argmax())


def crop_object(
    sample: Union[MicrographSample, np.ndarray],
    region: ObjectRegion,
    pad: int = 0,
) -> np.ndarray:
    """
    Bbox + pad crop with every non-object pixel set to 0.

    The pad is clipped at the image borders.
    """
    image = sample.image if isinstance(sample, MicrographSample) else np.asarray(sample)
    if region.area == 0:
        raise ValueError(f"region {region.id} is empty")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    region.check_bounds(image.shape)

    top, left, height, width = region.bbox
    r0, c0 = max(0, top - pad), max(0, left - pad)
    r1, c1 = min(image.shape[0], top + height + pad), min(image.shape[1], left + width + pad)
    keep = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    keep[region.rows - r0, region.cols - c0] = True
    return np.where(keep, image[r0:r1, c0:c1], 0).astype(image.dtype)


def warp_resize(patch: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """
    Bilinear resample to exactly target (T_h, T_w); aspect ratio is not kept.

    Output pixel d samples source coordinate (d + 0.5) * in / out - 0.5, clamped
    to the source grid, so equal sizes give the identity.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.size == 0:
        raise ValueError(f"patch must be a non-empty 2-D array, got shape {patch.shape}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"warp target must be positive, got {target}")
    h, w = patch.shape
    rows = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    cols = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(patch, [rr, cc], order=1, mode="nearest")
