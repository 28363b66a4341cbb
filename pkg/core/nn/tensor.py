"""
Dense rank-4 tensors (batch, channel, height, width).

Tensors are plain numpy arrays in C order (width fastest). Every operation in
core.nn returns a new array and never mutates its inputs.
"""
from typing import Literal, Sequence

import numpy as np


Tensor = np.ndarray
Precision = Literal["float32", "float64"]


class ShapeMismatchError(ValueError):
    """A tensor did not have the shape an operation requires."""

    def __init__(self, what: str, expected: Sequence[int] | str, got: Sequence[int]):
        self.expected = expected
        self.got = tuple(got)
        super().__init__(f"{what}: expected shape {_fmt(expected)}, got {_fmt(got)}")


def _fmt(shape) -> str:
    if isinstance(shape, str):
        return shape
    return "(" + ", ".join(str(int(d)) for d in shape) + ")"


def resolve_dtype(precision: Precision) -> np.dtype:
    """Map a precision name to a numpy float dtype."""
    if precision not in ("float32", "float64"):
        raise ValueError(f"Unsupported precision '{precision}' (use float32 or float64)")
    return np.dtype(precision)


def ensure_rank4(x: np.ndarray, what: str = "input") -> np.ndarray:
    """Return x as a floating rank-4 array, rejecting anything else."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatchError(what, "(n, c, h, w)", x.shape)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def require_shape(x: np.ndarray, expected: Sequence[int], what: str) -> None:
    if tuple(x.shape) != tuple(expected):
        raise ShapeMismatchError(what, expected, x.shape)


def is_finite(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)))
