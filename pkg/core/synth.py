"""
Deterministic synthetic micrograph generator.

Every image is a bright noisy matrix (class 0) carrying non-overlapping dark
elliptical objects of one constituent class, each filled with that class's
procedural texture:

    1  diagonal stripes      constant along the anti-diagonal, period 8
    2  speckle               i.i.d. uniform intensities, isotropic
    3  horizontal bands      constant along rows, period 6
    4  blobs                 smoothed gaussian field, low contrast between neighbours

All object intensities stay at or below threshold - 20 and all matrix
intensities above the threshold, so thresholding recovers the placement mask
exactly. Sample i draws from its own stream seeded by (rng_seed, i).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from core.imaging.io import save_sample
from core.logging import get_logger, log_execution_time
from core.models.micrograph import DatasetManifest, ManifestEntry, MicrographSample, class_names
from core.models.training import SynthConfig

logger = get_logger("synthgen")

TEXTURE_MARGIN = 20
PLACEMENT_GAP = 2
SIGNATURE_THRESHOLD = 18.0


@dataclass(frozen=True)
class SynthResult:
    sample: MicrographSample
    placed: int


# ============================================================================
# TEXTURES
# ============================================================================

def class_texture(cls: int, shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Full-frame float texture for constituent class 1..4."""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    if cls == 1:
        phase = int(rng.integers(0, 8))
        return np.where(((rows + cols + phase) // 4) % 2 == 0, 20.0, 120.0)
    if cls == 2:
        return rng.integers(30, 150, size=shape).astype(np.float64)
    if cls == 3:
        phase = int(rng.integers(0, 6))
        return np.where(((rows + phase) // 3) % 2 == 0, 40.0, 140.0)
    if cls == 4:
        field = ndimage.gaussian_filter(rng.normal(size=shape), sigma=3.0)
        z = (field - field.mean()) / (field.std() + 1e-12)
        return 85.0 + 25.0 * z
    raise ValueError(f"constituent class must be in 1..4, got {cls}")


def texture_signature(patch: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """
    Mean absolute neighbour differences (down a column, along a row, along the
    anti-diagonal), counting only pairs with both pixels inside mask.
    """
    p = np.asarray(patch, dtype=np.float64)
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pairs = (
        (p[1:, :] - p[:-1, :], m[1:, :] & m[:-1, :]),
        (p[:, 1:] - p[:, :-1], m[:, 1:] & m[:, :-1]),
        (p[1:, :-1] - p[:-1, 1:], m[1:, :-1] & m[:-1, 1:]),
    )
    out = []
    for diff, valid in pairs:
        if not valid.any():
            raise ValueError("texture_signature needs at least one neighbour pair inside the mask")
        out.append(float(np.abs(diff[valid]).mean()))
    return tuple(out)


def classify_texture(signature: Tuple[float, float, float], threshold: float = SIGNATURE_THRESHOLD) -> int:
    """Directional-difference rule separating the four texture families."""
    d_row, d_col, d_anti = signature
    if max(signature) < threshold:
        return 4
    if d_col < threshold:
        return 3
    if d_anti < threshold:
        return 1
    return 2


# ============================================================================
# SAMPLES
# ============================================================================

def _ellipse(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    """Boolean footprint of a randomly oriented filled ellipse."""
    lo, hi = config.object_size
    a = rng.uniform(lo, hi) / 2.0
    b = rng.uniform(lo, hi) / 2.0
    theta = rng.uniform(0.0, np.pi)
    r = int(np.ceil(max(a, b)))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synthesize(config: SynthConfig, cls: int, seed, name: str = "sample") -> SynthResult:
    """generate_sample plus the number of objects actually placed."""
    if not 1 <= cls <= config.n_classes:
        raise ValueError(f"constituent class must be in 1..{config.n_classes}, got {cls}")
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    ceiling = config.threshold - TEXTURE_MARGIN

    image = config.matrix_level + config.noise_sigma * rng.normal(size=(h, w))
    image = np.clip(image, config.threshold + 1, 255)

    objects = np.zeros((h, w), dtype=bool)
    blocked = np.zeros((h, w), dtype=bool)
    gap = np.ones((2 * PLACEMENT_GAP + 1, 2 * PLACEMENT_GAP + 1), dtype=bool)
    placed = 0
    attempts = 0
    while placed < config.objects_per_image and attempts < config.max_placement_retries:
        attempts += 1
        shape = _ellipse(rng, config)
        s = shape.shape[0]
        top = int(rng.integers(PLACEMENT_GAP, h - s - PLACEMENT_GAP + 1))
        left = int(rng.integers(PLACEMENT_GAP, w - s - PLACEMENT_GAP + 1))
        window = (slice(top, top + s), slice(left, left + s))
        if np.any(blocked[window] & shape):
            continue
        objects[window] |= shape
        grown = np.zeros((h, w), dtype=bool)
        grown[window] = shape
        blocked |= ndimage.binary_dilation(grown, structure=gap)
        placed += 1

    if placed < config.objects_per_image:
        logger.warning(
            f"Placed {placed} of {config.objects_per_image} objects",
            extra={"sample": name, "attempts": attempts},
        )

    texture = class_texture(cls, (h, w), rng) + config.noise_sigma * rng.normal(size=(h, w))
    image = np.where(objects, np.clip(texture, 0, ceiling), image)

    sample = MicrographSample(
        name=name,
        image=np.rint(image).astype(np.uint8),
        label_map=np.where(objects, cls, 0).astype(np.uint8),
        mask=objects,
        sample_class=cls,
    )
    return SynthResult(sample=sample, placed=placed)


def generate_sample(config: SynthConfig, cls: int, seed, name: str = "sample") -> MicrographSample:
    """
    One synthetic micrograph of constituent class cls, bit-identical for a given seed.

    Objects that cannot be placed without overlap within the retry budget are
    dropped with a warning.
    """
    return synthesize(config, cls, seed, name).sample


# ============================================================================
# DATASET
# ============================================================================

def dataset_plan(config: SynthConfig) -> List[Tuple[int, str, str, int]]:
    """(index, split, name, class) for every sample; classes cycle 1..n within each split."""
    plan = []
    index = 0
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        for j in range(count):
            plan.append((index, split, f"{split}_{j:03d}", j % config.n_classes + 1))
            index += 1
    return plan


@log_execution_time(logger)
def generate_dataset(config: SynthConfig, out_dir: Path, threads: int = 1) -> DatasetManifest:
    """
    Write every sample's rasters under out_dir/<split>/, plus manifest.json and
    synth_config.json. Output bytes do not depend on threads.

    Returns:
        The written manifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = dataset_plan(config)

    def build(task) -> Tuple[ManifestEntry, int]:
        index, split, name, cls = task
        result = synthesize(config, cls, [config.rng_seed, index], name)
        return save_sample(result.sample, out_dir, split, object_count=result.placed), cls

    logger.info("Generating synthetic dataset",
                extra={"samples": len(plan), "out": str(out_dir), "threads": threads})
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        built = list(pool.map(build, plan))

    names = class_names(config.n_classes)
    totals: Dict[str, int] = {names[c]: 0 for c in range(1, config.n_classes + 1)}
    for entry, cls in built:
        totals[names[cls]] += entry.object_count or 0

    manifest = DatasetManifest(
        n_classes=config.n_classes,
        class_names=names,
        entries=[entry for entry, _ in built],
        class_object_totals=totals,
    )
    manifest.write(out_dir / "manifest.json")
    (out_dir / "synth_config.json").write_text(
        config.model_dump_json(indent=2) + "\n", encoding="utf-8"
    )
    manifest.root = str(out_dir)
    logger.info("Synthetic dataset written", extra={"samples": len(plan), "objects": totals})
    return manifest
