"""
Sliding-window patch grids, per-class stride balancing, and rotation augmentation.

Grid arithmetic (top-left anchored, trailing remainder dropped):
    count_y = (H - P_h) // s_y + 1
    count_x = (W - P_w) // s_x + 1
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.logging import get_logger
from core.models.micrograph import MicrographSample

logger = get_logger("imgdata")

Pair = Union[int, Tuple[int, int]]


def _pair(value: Pair) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


class BalancingError(ValueError):
    """Some class cannot reach the target patch count even at stride 1."""

    def __init__(self, target_count: int, maxima: Dict[int, int]):
        self.target_count = target_count
        self.maxima = dict(maxima)
        short = {cls: n for cls, n in maxima.items() if n < target_count}
        super().__init__(
            f"target of {target_count} patches per class is unachievable; "
            f"maximum patches at stride 1 per class: {short}"
        )


class PatchGrid(BaseModel):
    """Origins of all patches of one image for one patch size and stride."""

    model_config = ConfigDict(frozen=True)

    image_shape: Tuple[int, int]
    patch: Tuple[int, int] = Field(..., description="(P_h, P_w) px")
    stride: Tuple[int, int] = Field(..., description="(s_y, s_x) px")
    count_y: int
    count_x: int
    origins: List[Tuple[int, int]] = Field(..., description="(row, col) top-left corners, row-major")

    @property
    def count(self) -> int:
        return self.count_y * self.count_x


def grid_counts(height: int, width: int, patch: Pair, stride: Pair) -> Tuple[int, int]:
    """(count_y, count_x) without building the origin list."""
    ph, pw = _pair(patch)
    sy, sx = _pair(stride)
    if ph < 1 or pw < 1:
        raise ValueError(f"patch must be positive, got {(ph, pw)}")
    if sy < 1 or sx < 1:
        raise ValueError(f"stride must be >= 1, got {(sy, sx)}")
    if ph > height or pw > width:
        raise ValueError(f"patch {(ph, pw)} larger than image {(height, width)}")
    return (height - ph) // sy + 1, (width - pw) // sx + 1


def compute_patch_grid(height: int, width: int, patch: Pair, stride: Pair) -> PatchGrid:
    """
    Top-left anchored grid of patch origins.

    Example:
        compute_patch_grid(7000, 8000, 1000, 100).count  # 61 * 71 = 4331
    """
    cy, cx = grid_counts(height, width, patch, stride)
    sy, sx = _pair(stride)
    origins = [(i * sy, j * sx) for i in range(cy) for j in range(cx)]
    return PatchGrid(
        image_shape=(height, width),
        patch=_pair(patch),
        stride=(sy, sx),
        count_y=cy,
        count_x=cx,
        origins=origins,
    )


def _class_count(dims: Sequence[Tuple[int, int]], patch: Pair, stride: int) -> int:
    total = 0
    for h, w in dims:
        cy, cx = grid_counts(h, w, patch, stride)
        total += cy * cx
    return total


def solve_balancing_stride(
    per_class_image_dims: Dict[int, Sequence[Tuple[int, int]]],
    patch: Pair,
    target_count: int,
    max_stride: Optional[int] = None,
) -> Dict[int, int]:
    """
    Largest stride per class whose summed grid count reaches target_count.

    Classes with fewer (or smaller) images get smaller strides. Strides are
    searched in 1..max_stride (default: the patch side).

    Raises:
        BalancingError: a class stays below target_count at stride 1
    """
    if target_count < 1:
        raise ValueError(f"target_count must be >= 1, got {target_count}")
    cap = max_stride if max_stride is not None else max(_pair(patch))

    maxima = {cls: _class_count(dims, patch, 1) for cls, dims in per_class_image_dims.items()}
    if any(n < target_count for n in maxima.values()):
        logger.warning("Balancing target unachievable", extra={"target": target_count, "maxima": maxima})
        raise BalancingError(target_count, maxima)

    strides = {}
    for cls, dims in sorted(per_class_image_dims.items()):
        # the summed count is non-increasing in the stride
        lo, hi = 1, cap
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if _class_count(dims, patch, mid) >= target_count:
                lo = mid
            else:
                hi = mid - 1
        strides[cls] = lo
    logger.info("Balancing strides solved", extra={"target": target_count, "strides": strides})
    return strides


# ============================================================================
# PATCH EXTRACTION
# ============================================================================

@dataclass(frozen=True)
class TrainingPatch:
    """Image/label-map patch pair cut from one sample."""
    image: np.ndarray
    labels: np.ndarray
    source: str
    origin: Tuple[int, int]
    sample_class: Optional[int] = None
    rotation: int = 0  # quarter turns applied


def extract_patch(sample: MicrographSample, origin: Tuple[int, int], patch: Pair) -> TrainingPatch:
    ph, pw = _pair(patch)
    r, c = origin
    return TrainingPatch(
        image=sample.image[r:r + ph, c:c + pw].copy(),
        labels=sample.label_map[r:r + ph, c:c + pw].copy(),
        source=sample.name,
        origin=(int(r), int(c)),
        sample_class=sample.sample_class,
    )


def extract_balanced_patches(
    samples_by_class: Dict[int, Sequence[MicrographSample]],
    patch: Pair,
    target_count: int,
    seed: int,
) -> List[TrainingPatch]:
    """
    Exactly target_count patches per class: solve the per-class stride, take
    every grid origin at that stride, then subsample uniformly (seeded) down
    to target_count, keeping enumeration order.
    """
    dims = {cls: [s.image.shape for s in samples] for cls, samples in samples_by_class.items()}
    strides = solve_balancing_stride(dims, patch, target_count)

    patches: List[TrainingPatch] = []
    for cls in sorted(samples_by_class):
        candidates = []
        for sample in samples_by_class[cls]:
            grid = compute_patch_grid(*sample.image.shape, patch, strides[cls])
            candidates.extend((sample, origin) for origin in grid.origins)
        rng = np.random.default_rng([seed, cls])
        keep = np.sort(rng.choice(len(candidates), size=target_count, replace=False))
        patches.extend(extract_patch(*candidates[i], patch) for i in keep)
        logger.debug("Class patches extracted",
                     extra={"class_index": cls, "stride": strides[cls], "candidates": len(candidates)})
    return patches


def extract_grid_patches(
    samples: Sequence[MicrographSample],
    patch: Pair,
    stride: Optional[Pair] = None,
) -> List[TrainingPatch]:
    """
    Every grid origin of every sample at one fixed stride (default: the patch
    side, i.e. non-overlapping tiles). Class frequencies are left as they are.
    """
    stride = stride if stride is not None else patch
    patches: List[TrainingPatch] = []
    for sample in samples:
        grid = compute_patch_grid(*sample.image.shape, patch, stride)
        patches.extend(extract_patch(sample, origin, patch) for origin in grid.origins)
    return patches


def augment_rotations(patches: Sequence[TrainingPatch]) -> List[TrainingPatch]:
    """
    Each patch followed by its 90, 180 and 270 degree rotations (4x count);
    label maps rotate with their images.
    """
    out: List[TrainingPatch] = []
    for p in patches:
        if p.image.shape[0] != p.image.shape[1] or p.labels.shape != p.image.shape:
            raise ValueError(f"rotation augmentation needs square patches, got {p.image.shape}")
        for k in range(4):
            out.append(TrainingPatch(
                image=np.rot90(p.image, k).copy(),
                labels=np.rot90(p.labels, k).copy(),
                source=p.source,
                origin=p.origin,
                sample_class=p.sample_class,
                rotation=(p.rotation + k) % 4,
            ))
    return out


def normalize_image(image: np.ndarray, dtype: np.dtype = np.float64) -> np.ndarray:
    """uint8 intensities -> network input scale x / 255 - 0.5."""
    return (np.asarray(image, dtype=np.float64) / 255.0 - 0.5).astype(dtype)
