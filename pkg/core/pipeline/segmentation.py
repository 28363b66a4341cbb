"""
Segmentation-based classification: tile the image, segment each tile with an
FCN, stitch the tiles back by averaging overlapping posteriors, then give every
object the constituent class most of its pixels were predicted as.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.imaging.objects import ObjectRegion
from core.imaging.patches import grid_counts, normalize_image
from core.logging import get_logger
from core.models.micrograph import MATRIX_CLASS, NOT_SEGMENTED
from core.models.results import ImageClassification, ObjectClassification
from core.nn.arch import fcn_scores
from core.nn.layers import softmax
from core.nn.network import Network

logger = get_logger("pipeline")

Tile = Tuple[Tuple[int, int], np.ndarray]  # ((row, col), scores (C, P, P))


@dataclass(frozen=True)
class SegmentationResult:
    """Per-pixel class posteriors (C, H, W) and their argmax label map (H, W)."""
    score_map: np.ndarray
    label_map: np.ndarray

    @classmethod
    def from_scores(cls, score_map: np.ndarray) -> "SegmentationResult":
        # argmax keeps the first index on ties
        return cls(score_map=score_map, label_map=score_map.argmax(axis=0).astype(np.int64))

    @property
    def n_channels(self) -> int:
        return self.score_map.shape[0]


def tile_origins(length: int, patch: int, stride: int) -> List[int]:
    """Grid origins along one axis plus an edge-anchored last tile covering any remainder."""
    count, _ = grid_counts(length, patch, patch, stride)
    origins = [i * stride for i in range(count)]
    if origins[-1] + patch < length:
        origins.append(length - patch)
    return origins


def stitch_tiles(tiles: Sequence[Tile], shape: Tuple[int, int], n_channels: int) -> np.ndarray:
    """
    Average overlapping tile scores per pixel (sum / count), accumulating in
    the given tile order.
    """
    acc = np.zeros((n_channels,) + tuple(shape), dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for (r, c), scores in tiles:
        ph, pw = scores.shape[-2:]
        acc[:, r:r + ph, c:c + pw] += scores
        count[r:r + ph, c:c + pw] += 1
    if np.any(count == 0):
        raise ValueError("tiles do not cover the whole image")
    return acc / count


def segment_image(
    net: Network,
    image: np.ndarray,
    patch: int,
    stride: Optional[int] = None,
    threads: int = 1,
) -> SegmentationResult:
    """
    Sliding-window segmentation of a grayscale micrograph.

    Args:
        net: FCN whose total stride divides patch
        image: (H, W) uint8 image
        patch: square tile side in px
        stride: tile step (default: patch, non-overlapping)
        threads: tile inference workers; results do not depend on it

    Returns:
        SegmentationResult with averaged softmax posteriors

    Images smaller than one tile are edge-padded to a single tile and cropped back.
    """
    stride = patch if stride is None else stride
    if patch % net.total_stride:
        raise ValueError(f"patch {patch} is not divisible by the network stride {net.total_stride}")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must be in 1..{patch}, got {stride}")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {image.shape}")

    h, w = image.shape
    ph, pw = max(0, patch - h), max(0, patch - w)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="edge")
    x = normalize_image(image, dtype=net.dtype)

    origins = [(r, c) for r in tile_origins(x.shape[0], patch, stride)
               for c in tile_origins(x.shape[1], patch, stride)]

    def infer(origin: Tuple[int, int]) -> Tile:
        r, c = origin
        tile = x[None, None, r:r + patch, c:c + patch]
        return origin, softmax(fcn_scores(net, tile), axis=1)[0]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        tiles = list(pool.map(infer, origins))

    scores = stitch_tiles(tiles, x.shape, net.n_classes)[:, :h, :w]
    logger.debug("Image segmented", extra={"tiles": len(tiles), "shape": [h, w], "stride": stride})
    return SegmentationResult.from_scores(scores)


def vote_histogram(label_map: np.ndarray, region: ObjectRegion, n_channels: int) -> np.ndarray:
    region.check_bounds(label_map.shape)
    return np.bincount(label_map[region.rows, region.cols].astype(np.int64), minlength=n_channels)


def max_vote_objects(
    seg: SegmentationResult,
    regions: Sequence[ObjectRegion],
) -> List[ObjectClassification]:
    """
    Majority vote of predicted constituent classes inside each region.

    The matrix channel is not a candidate; a region with no constituent-class
    pixels is NOT_SEGMENTED. Ties go to the lowest class index.
    """
    return vote_objects(seg.label_map, regions, seg.n_channels)


def vote_objects(
    label_map: np.ndarray,
    regions: Sequence[ObjectRegion],
    n_channels: int,
) -> List[ObjectClassification]:
    """max_vote_objects over a bare label map with classes 0..n_channels - 1."""
    out = []
    for region in regions:
        hist = vote_histogram(label_map, region, n_channels)
        constituents = hist[MATRIX_CLASS + 1:]
        if constituents.sum() == 0:
            voted = NOT_SEGMENTED
        else:
            voted = int(constituents.argmax()) + MATRIX_CLASS + 1
        out.append(ObjectClassification(
            region_id=region.id,
            voted_class=voted,
            votes=[int(v) for v in hist],
            area=region.area,
        ))
    return out


def classify_whole_image(
    object_classifications: Sequence[ObjectClassification],
    n_cl: Optional[int] = None,
) -> ImageClassification:
    """
    Majority class over voted objects (NOT_SEGMENTED excluded, ties to the
    lowest class). No voted object gives an explicit unclassifiable result.
    """
    if n_cl is None:
        n_cl = max((len(o.votes) - 1 for o in object_classifications), default=0)
    voted = [o.voted_class for o in object_classifications if o.voted_class != NOT_SEGMENTED]
    if not voted:
        return ImageClassification.unclassifiable(n_cl)
    counts = np.bincount(np.asarray(voted, dtype=np.int64), minlength=n_cl + 1)
    return ImageClassification(
        status="classified",
        voted_class=int(counts.argmax()),
        object_votes=[int(v) for v in counts],
    )


def segment_and_vote(
    net: Network,
    image: np.ndarray,
    regions: Sequence[ObjectRegion],
    patch: int,
    stride: Optional[int] = None,
    threads: int = 1,
) -> Tuple[SegmentationResult, List[ObjectClassification], ImageClassification]:
    """Full MVFCNN path for one image."""
    seg = segment_image(net, image, patch, stride, threads)
    objects = max_vote_objects(seg, regions)
    return seg, objects, classify_whole_image(objects, seg.n_channels - 1)
