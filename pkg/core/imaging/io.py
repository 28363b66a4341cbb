"""
Raster I/O: 8-bit grayscale PNG/PGM images, class-index label maps, binary
masks, and color-coded class maps.
"""
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from core.logging import get_logger
from core.models.micrograph import (
    CLASS_COLORS,
    DatasetManifest,
    ManifestEntry,
    MicrographSample,
    Split,
)

logger = get_logger("imgdata")


def read_gray(path: Path) -> np.ndarray:
    """
    Read an 8-bit single-channel raster (PNG or binary PGM) as uint8 (H, W).

    Palette images keep their index values; RGB images are converted to luminance.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "1"):
            logger.warning("Converting raster to grayscale", extra={"path": str(path), "mode": img.mode})
            img = img.convert("L")
        array = np.array(img)
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    return array.astype(np.uint8, copy=False)


def write_gray(path: Path, array: np.ndarray) -> Path:
    """Write uint8 (H, W) as PNG, or binary PGM (P5) when the suffix is .pgm."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"grayscale raster must be 2-D, got shape {array.shape}")
    if array.dtype != np.uint8:
        if array.min() < 0 or array.max() > 255:
            raise ValueError(f"raster values outside 0..255 for {path}")
        array = array.astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(np.ascontiguousarray(array))
    if path.suffix.lower() == ".pgm":
        image.save(path, format="PPM")
    else:
        image.save(path, format="PNG")
    return path


def read_mask(path: Path) -> np.ndarray:
    return read_gray(path) > 0


def write_mask(path: Path, mask: np.ndarray) -> Path:
    return write_gray(path, np.where(mask, 255, 0).astype(np.uint8))


def color_map(labels: np.ndarray) -> np.ndarray:
    """
    (H, W) class indices -> (H, W, 3) RGB using the class legend.

    Matrix is black, constituents red/green/blue/yellow, NOT_SEGMENTED white;
    unknown indices render gray.
    """
    labels = np.asarray(labels)
    rgb = np.full(labels.shape + (3,), 128, dtype=np.uint8)
    for cls, color in CLASS_COLORS.items():
        rgb[labels == cls] = color
    return rgb


def write_color_map(path: Path, labels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(color_map(labels)).save(path, format="PNG")
    return path


# ============================================================================
# SAMPLES
# ============================================================================

def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> MicrographSample:
    """Read the three rasters of a manifest entry."""
    return MicrographSample(
        name=entry.name,
        image=read_gray(manifest.resolve(entry.image)),
        label_map=read_gray(manifest.resolve(entry.label_map)),
        mask=read_mask(manifest.resolve(entry.mask)),
        sample_class=entry.sample_class,
    )


def save_sample(
    sample: MicrographSample,
    root: Path,
    split: Split,
    object_count: Optional[int] = None,
) -> ManifestEntry:
    """
    Write image, label map and mask PNGs under root/<split>/ and return the
    manifest entry with paths relative to root.
    """
    root = Path(root)
    rel = Path(split)
    image_rel = rel / f"{sample.name}_image.png"
    labels_rel = rel / f"{sample.name}_labels.png"
    mask_rel = rel / f"{sample.name}_mask.png"
    try:
        write_gray(root / image_rel, sample.image)
        write_gray(root / labels_rel, sample.label_map)
        write_mask(root / mask_rel, sample.mask)
    except OSError:
        logger.error("Failed to write sample", exc_info=True, extra={"sample": sample.name, "root": str(root)})
        raise
    return ManifestEntry(
        name=sample.name,
        image=image_rel.as_posix(),
        label_map=labels_rel.as_posix(),
        mask=mask_rel.as_posix(),
        split=split,
        sample_class=sample.sample_class,
        object_count=object_count,
    )
