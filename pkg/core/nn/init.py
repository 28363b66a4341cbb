"""
Parameter initialization for a NetworkSpec.

Every parameter draws from its own stream seeded by (seed, crc32(name)), so a
layer gets the same initial weights in every variant that contains it.
"""
import zlib
from typing import Dict

import numpy as np

from core.models.layers import ConvLayer, FcLayer, NetworkSpec, UpsampleLayer
from core.models.training import InitScheme
from core.nn.layers import bilinear_kernel

FIRST_CONV_SIGMA = 1e-4
GAUSSIAN_SIGMA = 0.01


def parameter_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_parameters(
    spec: NetworkSpec,
    seed: int = 0,
    scheme: InitScheme = "he",
    dtype: np.dtype = np.float64,
) -> Dict[str, np.ndarray]:
    """
    Fresh parameters for every tensor the spec names.

    Args:
        spec: network graph
        seed: run seed
        scheme: "he" draws N(0, 2 / fan_in); "gaussian" draws N(0, 1e-4^2) for the
            first convolution and N(0, 0.01^2) for every other weight
        dtype: parameter precision

    Biases start at zero, zero_init layers (new skip scores) are all zeros and
    trainable upsampling kernels start as the bilinear kernel.
    """
    if scheme not in ("he", "gaussian"):
        raise ValueError(f"unknown init scheme '{scheme}'")
    params: Dict[str, np.ndarray] = {}
    first_conv = True
    for layer in spec.layers:
        if isinstance(layer, (ConvLayer, FcLayer)):
            w_name, b_name = f"{layer.name}.weight", f"{layer.name}.bias"
            shapes = layer.parameter_shapes()
            w_shape = shapes[w_name]
            fan_in = int(np.prod(w_shape[1:]))
            if getattr(layer, "zero_init", False):
                weights = np.zeros(w_shape, dtype=dtype)
            else:
                if scheme == "he":
                    sigma = np.sqrt(2.0 / fan_in)
                else:
                    sigma = FIRST_CONV_SIGMA if (first_conv and isinstance(layer, ConvLayer)) else GAUSSIAN_SIGMA
                weights = parameter_rng(seed, w_name).normal(0.0, sigma, size=w_shape).astype(dtype)
            params[w_name] = weights
            params[b_name] = np.zeros(shapes[b_name], dtype=dtype)
            if isinstance(layer, ConvLayer):
                first_conv = False
        elif isinstance(layer, UpsampleLayer) and layer.trainable:
            kernel = bilinear_kernel(layer.factor, dtype)
            params[layer.kernel_name()] = np.repeat(kernel[None], layer.channels, axis=0)
    return params
