"""
Object-based classification: mask, crop and warp every object, then classify
the crop with a small CNN.

The classifier interface is pluggable: anything implementing ObjectClassifier
can replace the CNN.
"""
from abc import ABC, abstractmethod
from typing import List, NamedTuple, Sequence

import numpy as np

from core.imaging.objects import ObjectRegion, connected_components, crop_object, region_truth, warp_resize
from core.imaging.patches import normalize_image
from core.logging import get_logger
from core.models.micrograph import MATRIX_CLASS, MicrographSample
from core.nn.layers import softmax
from core.nn.network import Network
from core.nn.optim import Example

logger = get_logger("pipeline")


class ObjectPrediction(NamedTuple):
    """Winning index in the network's output space (first index on ties) and the posterior."""
    class_index: int
    posterior: np.ndarray

    @property
    def label(self) -> int:
        """Constituent class label (network index 0 is constituent class 1)."""
        return self.class_index + MATRIX_CLASS + 1


def object_input(sample: MicrographSample, region: ObjectRegion, input_size: int, pad: int = 0,
                 dtype: np.dtype = np.float64) -> np.ndarray:
    """Masked crop warped to (1, input_size, input_size) at network input scale."""
    crop = crop_object(sample, region, pad)
    warped = warp_resize(crop, (input_size, input_size))
    return normalize_image(warped, dtype=dtype)[None]


def classify_object_cnn(
    net: Network,
    sample: MicrographSample,
    region: ObjectRegion,
    input_size: int,
    pad: int = 0,
) -> ObjectPrediction:
    """
    crop_object -> warp_resize -> forward -> softmax; the class with the highest
    probability wins.

    Raises:
        ValueError: empty region, or the network does not take input_size inputs
    """
    if region.area == 0:
        raise ValueError(f"region {region.id} is empty")
    if tuple(net.spec.input_shape[1:]) != (input_size, input_size):
        raise ValueError(f"network input {net.spec.input_shape[1:]} does not match input_size {input_size}")
    x = object_input(sample, region, input_size, pad, dtype=net.dtype)
    posterior = softmax(net.forward(x[None], train=False).output[0], axis=-1)
    return ObjectPrediction(int(posterior.argmax()), posterior)


class ObjectClassifier(ABC):
    """Assigns a constituent class to one object region."""

    @abstractmethod
    def classify(self, sample: MicrographSample, region: ObjectRegion) -> ObjectPrediction:
        pass

    def classify_all(self, sample: MicrographSample, regions: Sequence[ObjectRegion]) -> List[ObjectPrediction]:
        return [self.classify(sample, region) for region in regions]


class CnnObjectClassifier(ObjectClassifier):
    """Object classifier backed by a trained mini CNN."""

    def __init__(self, net: Network, pad: int = 0):
        self.net = net
        self.input_size = net.spec.input_shape[1]
        self.pad = pad

    def classify(self, sample: MicrographSample, region: ObjectRegion) -> ObjectPrediction:
        return classify_object_cnn(self.net, sample, region, self.input_size, self.pad)


def build_object_dataset(
    samples: Sequence[MicrographSample],
    input_size: int,
    pad: int = 0,
    min_object_area: int = 30,
    augment: bool = False,
    dtype: np.dtype = np.float64,
) -> List[Example]:
    """
    One (warped crop, class index) example per ground-truth object.

    Objects come from each sample's constituent mask; the target is the majority
    non-matrix label inside the object, shifted to the network's 0-based index.
    With augment, the 90/180/270 degree rotations of every crop are added.
    """
    examples: List[Example] = []
    skipped = 0
    for sample in samples:
        for region in connected_components(sample.mask, min_object_area):
            truth = region_truth(sample.label_map, region)
            if truth == MATRIX_CLASS:
                skipped += 1
                continue
            x = object_input(sample, region, input_size, pad, dtype)
            for k in range(4 if augment else 1):
                examples.append((np.rot90(x, k, axes=(1, 2)).copy(), truth - MATRIX_CLASS - 1))
    if skipped:
        logger.warning("Objects without constituent labels skipped", extra={"skipped": skipped})
    logger.info("Object dataset built", extra={"examples": len(examples), "augment": augment})
    return examples
