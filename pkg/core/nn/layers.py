"""
Layer kernels: forward and backward passes for every layer the networks use.

All functions are pure: they take arrays and parameter records and return new
arrays. Convolutions are computed as im2col + tensordot over a strided window
view; backward passes scatter the column gradients back (col2im).

Layers:
    conv2d        convolution with stride and zero padding
    maxpool       window max with recorded argmax (first occurrence on ties)
    relu          max(0, x)
    fc            fully-connected y = W x + b
    dropout       inverted dropout (identity in eval mode)
    softmax       max-subtracted softmax along a class axis
    cross_entropy averaged (or summed) over labeled positions, gradient w.r.t. logits
    upsample      grid-aligned bilinear interpolation as a fractionally strided convolution
    skip_fuse     elementwise sum of two score maps
"""
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.logging import get_logger
from core.nn.tensor import ShapeMismatchError, ensure_rank4, require_shape

logger = get_logger("tensor-nn")


# ============================================================================
# PARAMETER RECORDS
# ============================================================================

@dataclass(frozen=True)
class ConvParams:
    """
    Convolution parameters.

    Attributes:
        weights: (K, C_in, k_h, k_w) filters
        bias: (K,) per-filter offsets
        stride: step between output positions in pixels
        padding: zero border added on every side in pixels
    """
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeMismatchError("conv weights", "(K, C_in, k_h, k_w)", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError("conv bias", (self.weights.shape[0],), self.bias.shape)
        if self.stride < 1:
            raise ValueError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"conv padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class FcParams:
    """Fully-connected parameters: weights (out_dim, in_dim), bias (out_dim,)."""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeMismatchError("fc weights", "(out_dim, in_dim)", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError("fc bias", (self.weights.shape[0],), self.bias.shape)


@dataclass(frozen=True)
class UpsampleParams:
    """
    Per-channel upsampling kernel.

    Attributes:
        factor: integer upsampling factor f
        kernel: (C, 2f, 2f) interpolation weights, one kernel per score channel
        trainable: whether the kernel receives gradient updates
    """
    factor: int
    kernel: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"upsampling factor must be >= 1, got {self.factor}")
        size = 2 * self.factor
        if self.kernel.ndim != 3 or self.kernel.shape[1:] != (size, size):
            raise ShapeMismatchError("upsample kernel", f"(C, {size}, {size})", self.kernel.shape)

    @classmethod
    def bilinear(cls, channels: int, factor: int, trainable: bool = False,
                 dtype: np.dtype = np.float64) -> "UpsampleParams":
        """Analytic bilinear kernel replicated for every channel."""
        if factor < 1:
            raise ValueError(f"upsampling factor must be >= 1, got {factor}")
        kernel = np.broadcast_to(bilinear_kernel(factor, dtype), (channels, 2 * factor, 2 * factor))
        return cls(factor=factor, kernel=kernel.copy(), trainable=trainable)


@dataclass
class DropoutState:
    """
    Dropout configuration and random stream.

    The generator is created from rng_seed once and advances with every
    training-mode call, so a run is reproducible from its seed.
    """
    rate: float
    mode: Literal["train", "eval"] = "train"
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        self.rng = np.random.default_rng(self.rng_seed)


@dataclass(frozen=True)
class PoolIndex:
    """Argmax record of a max-pool forward call, consumed by maxpool_backward."""
    input_shape: Tuple[int, int, int, int]
    output_shape: Tuple[int, int, int, int]
    source: np.ndarray  # flat h*w index of the winning input pixel per output cell


class ConvGradients(NamedTuple):
    grad_input: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


class FcGradients(NamedTuple):
    grad_input: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


class UpsampleGradients(NamedTuple):
    grad_input: np.ndarray
    grad_kernel: Optional[np.ndarray]


@dataclass(frozen=True)
class CrossEntropyResult:
    """
    Loss value, its gradient with respect to the logits, and whether any
    true-class probability had to be clamped away from zero.
    """
    loss: float
    grad_logits: np.ndarray
    labeled_positions: int
    clamped: bool = False


# ============================================================================
# CONVOLUTION
# ============================================================================

def _conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (n, c, oh, ow, kh, kw) view, no copy
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """
    out[n, k, i, j] = sum_c (W[k, c] * x[n, c])[i, j] + b[k]

    Args:
        x: (n, C_in, h, w) input
        params: filters, bias, stride, padding

    Returns:
        (n, K, (h + 2p - k_h) // s + 1, (w + 2p - k_w) // s + 1) output
    """
    x = ensure_rank4(x)
    k, c_in, kh, kw = params.weights.shape
    if x.shape[1] != c_in:
        raise ShapeMismatchError(
            f"conv2d input channels for weights {tuple(params.weights.shape)}",
            (x.shape[0], c_in, x.shape[2], x.shape[3]),
            x.shape,
        )
    oh = _conv_output_size(x.shape[2], kh, params.stride, params.padding)
    ow = _conv_output_size(x.shape[3], kw, params.stride, params.padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            f"conv2d input too small for kernel {kh}x{kw} with padding {params.padding}",
            f"(n, {c_in}, >={kh - 2 * params.padding}, >={kw - 2 * params.padding})",
            x.shape,
        )

    win = _windows(_pad_spatial(x, params.padding), kh, kw, params.stride)
    out = np.tensordot(win, params.weights, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, K)
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=np.result_type(x.dtype, params.weights.dtype))


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray) -> ConvGradients:
    """
    Exact partial derivatives of sum(grad_out * conv2d_forward(x, params)).

    Returns:
        ConvGradients(grad_input, grad_weights, grad_bias)
    """
    x = ensure_rank4(x)
    k, c_in, kh, kw = params.weights.shape
    s, p = params.stride, params.padding
    n, _, h, w = x.shape
    oh = _conv_output_size(h, kh, s, p)
    ow = _conv_output_size(w, kw, s, p)
    require_shape(grad_out, (n, k, oh, ow), "conv2d grad_out")

    xp = _pad_spatial(x, p)
    win = _windows(xp, kh, kw, s)

    grad_weights = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (K, C, kh, kw)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    # col2im: every output cell scatters grad * W back over its window
    cols = np.tensordot(grad_out, params.weights, axes=([1], [0]))  # (n, oh, ow, C, kh, kw)
    grad_padded = np.zeros(xp.shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_input = grad_padded[:, :, p:p + h, p:p + w]

    return ConvGradients(np.ascontiguousarray(grad_input), grad_weights, grad_bias)


# ============================================================================
# MAX POOLING
# ============================================================================

def maxpool_forward(x: np.ndarray, window: Tuple[int, int], stride: int) -> Tuple[np.ndarray, PoolIndex]:
    """
    Window maximum with argmax bookkeeping.

    Ties resolve to the first maximal element in row-major window order.

    Returns:
        (output, index) where index feeds maxpool_backward
    """
    x = ensure_rank4(x)
    ph, pw = window
    n, c, h, w = x.shape
    if ph < 1 or pw < 1 or stride < 1:
        raise ValueError(f"pool window {window} and stride {stride} must be positive")
    if ph > h or pw > w:
        raise ValueError(f"pool window {ph}x{pw} larger than input {h}x{w}")

    win = _windows(x, ph, pw, stride)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, ph * pw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(oh)[:, None] * stride + arg // pw
    cols = np.arange(ow)[None, :] * stride + arg % pw
    index = PoolIndex(
        input_shape=(n, c, h, w),
        output_shape=(n, c, oh, ow),
        source=rows * w + cols,
    )
    return np.ascontiguousarray(out), index


def maxpool_backward(index: PoolIndex, grad_out: np.ndarray) -> np.ndarray:
    """Route each upstream gradient to the input cell that won its window."""
    require_shape(grad_out, index.output_shape, "maxpool grad_out (stale index?)")
    n, c, h, w = index.input_shape
    grad_flat = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    # windows may overlap when stride < window, hence add.at
    np.add.at(
        grad_flat,
        (np.arange(n * c)[:, None], index.source.reshape(n * c, -1)),
        grad_out.reshape(n * c, -1),
    )
    return grad_flat.reshape(n, c, h, w)


# ============================================================================
# ACTIVATION / FULLY-CONNECTED / DROPOUT
# ============================================================================

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    require_shape(grad_out, x.shape, "relu grad_out")
    return grad_out * (x > 0)


def fc_forward(x: np.ndarray, params: FcParams) -> np.ndarray:
    """
    y_k = sum_l W_kl x_l + b_k over the last axis of x.

    Accepts a single vector (in_dim,) or a batch (n, in_dim).
    """
    x = np.asarray(x)
    in_dim = params.weights.shape[1]
    if x.shape[-1] != in_dim:
        raise ShapeMismatchError("fc input", (*x.shape[:-1], in_dim), x.shape)
    return x @ params.weights.T + params.bias


def fc_backward(x: np.ndarray, params: FcParams, grad_out: np.ndarray) -> FcGradients:
    out_dim, in_dim = params.weights.shape
    require_shape(grad_out, (*x.shape[:-1], out_dim), "fc grad_out")
    x2 = x.reshape(-1, in_dim)
    g2 = grad_out.reshape(-1, out_dim)
    return FcGradients(
        grad_input=(g2 @ params.weights).reshape(x.shape),
        grad_weights=g2.T @ x2,
        grad_bias=g2.sum(axis=0),
    )


def dropout_forward(x: np.ndarray, state: DropoutState) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Inverted dropout.

    Train mode zeroes each element with probability p and scales survivors by
    1 / (1 - p); eval mode is the identity.

    Returns:
        (output, scale) where scale is the per-element multiplier for the
        backward pass, or None in eval mode
    """
    if not 0.0 <= state.rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {state.rate}")
    if state.mode == "eval" or state.rate == 0.0:
        return x, None
    keep = state.rng.random(x.shape) >= state.rate
    scale = keep.astype(x.dtype) / (1.0 - state.rate)
    return x * scale, scale


def dropout_backward(scale: Optional[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
    if scale is None:
        return grad_out
    return grad_out * scale


# ============================================================================
# SOFTMAX / CROSS-ENTROPY
# ============================================================================

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """exp(z_j) / sum_k exp(z_k), computed on max-subtracted logits."""
    z = np.asarray(logits)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def default_class_axis(ndim: int) -> int:
    """Class axis convention: (C,), (C, H, W) -> 0; (n, C), (n, C, H, W) -> 1."""
    return 1 if ndim in (2, 4) else 0


def one_hot(labels: np.ndarray, n_classes: int, class_axis: Optional[int] = None,
            dtype: np.dtype = np.float64) -> np.ndarray:
    """
    One-hot encode integer labels along a new class axis.

    Negative labels mark unlabeled positions and encode as all-zero.
    """
    labels = np.asarray(labels)
    valid = labels >= 0
    encoded = np.eye(n_classes, dtype=dtype)[np.where(valid, labels, 0)]
    encoded *= valid[..., None]
    if class_axis is None:
        class_axis = default_class_axis(encoded.ndim)
    return np.moveaxis(encoded, -1, class_axis)


def cross_entropy_loss(
    pred: np.ndarray,
    truth: np.ndarray,
    class_axis: Optional[int] = None,
    reduction: Literal["mean", "sum"] = "mean",
    eps: float = 1e-12,
) -> CrossEntropyResult:
    """
    -sum_x P'(x) log P(x) over labeled positions.

    Args:
        pred: softmax probabilities
        truth: one-hot targets of the same shape; all-zero positions are unlabeled
        class_axis: class axis (default: 1 for batched inputs, 0 otherwise)
        reduction: "mean" averages over labeled positions, "sum" adds them up
        eps: floor applied to true-class probabilities

    Returns:
        CrossEntropyResult with the gradient w.r.t. the logits, softmax(z) - onehot
        (divided by the labeled-position count under "mean")
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    require_shape(truth, pred.shape, "cross-entropy truth")
    if class_axis is None:
        class_axis = default_class_axis(pred.ndim)

    labeled = truth.sum(axis=class_axis, keepdims=True) > 0
    count = int(labeled.sum())
    if count == 0:
        return CrossEntropyResult(0.0, np.zeros_like(pred), 0, False)

    hot = truth > 0
    clamped = bool(np.any(hot & (pred < eps)))
    if clamped:
        logger.warning(
            "Cross-entropy clamped a vanishing true-class probability",
            extra={"eps": eps},
        )
    log_p = np.log(np.where(hot, np.maximum(pred, eps), 1.0))
    total = float(-(truth * log_p).sum())

    denom = float(count) if reduction == "mean" else 1.0
    grad = (pred - truth) * labeled / denom
    return CrossEntropyResult(total / denom, grad, count, clamped)


# ============================================================================
# UPSAMPLING / SKIP FUSION
# ============================================================================

def bilinear_kernel(factor: int, dtype: np.dtype = np.float64) -> np.ndarray:
    """
    2f x 2f interpolation kernel centered at index f:
    k[u, v] = max(0, 1 - |u - f| / f) * max(0, 1 - |v - f| / f)
    """
    taps = np.clip(1.0 - np.abs(np.arange(2 * factor) - factor) / factor, 0.0, None)
    return np.outer(taps, taps).astype(dtype)


def upsample_forward(x: np.ndarray, params: UpsampleParams) -> np.ndarray:
    """
    Fractionally strided (1/f) convolution producing (n, C, f*h, f*w).

    With the bilinear kernel this evaluates
        y[i, j] = sum_{a, b in {0, 1}} |1 - a - {i/f}| |1 - b - {j/f}| x[i//f + a, j//f + b]
    with the last row and column replicated past the border, so grid points
    y[f*r, f*c] reproduce x[r, c] exactly and constant maps stay constant.
    """
    x = ensure_rank4(x)
    f = params.factor
    n, c, h, w = x.shape
    if params.kernel.shape[0] != c:
        raise ShapeMismatchError("upsample input channels", (n, params.kernel.shape[0], h, w), x.shape)

    xe = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
    canvas = np.zeros((n, c, f * h + 2 * f, f * w + 2 * f), dtype=np.result_type(x.dtype, params.kernel.dtype))
    for u in range(2 * f):
        for v in range(2 * f):
            weight = params.kernel[:, u, v][None, :, None, None]
            canvas[:, :, u:u + f * h + 1:f, v:v + f * w + 1:f] += xe * weight
    return np.ascontiguousarray(canvas[:, :, f:f + f * h, f:f + f * w])


def upsample_backward(x: np.ndarray, params: UpsampleParams, grad_out: np.ndarray) -> UpsampleGradients:
    """Adjoint of upsample_forward; the kernel gradient is only computed when trainable."""
    x = ensure_rank4(x)
    f = params.factor
    n, c, h, w = x.shape
    require_shape(grad_out, (n, c, f * h, f * w), "upsample grad_out")

    xe = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
    grad_canvas = np.zeros((n, c, f * h + 2 * f, f * w + 2 * f), dtype=grad_out.dtype)
    grad_canvas[:, :, f:f + f * h, f:f + f * w] = grad_out

    grad_xe = np.zeros(xe.shape, dtype=grad_out.dtype)
    grad_kernel = np.zeros(params.kernel.shape, dtype=grad_out.dtype) if params.trainable else None
    for u in range(2 * f):
        for v in range(2 * f):
            g = grad_canvas[:, :, u:u + f * h + 1:f, v:v + f * w + 1:f]
            grad_xe += g * params.kernel[:, u, v][None, :, None, None]
            if grad_kernel is not None:
                grad_kernel[:, u, v] = (g * xe).sum(axis=(0, 2, 3))

    # fold the replicated border back onto the last row/column
    grad_input = grad_xe[:, :, :h, :w].copy()
    grad_input[:, :, h - 1, :] += grad_xe[:, :, h, :w]
    grad_input[:, :, :, w - 1] += grad_xe[:, :, :h, w]
    grad_input[:, :, h - 1, w - 1] += grad_xe[:, :, h, w]
    return UpsampleGradients(grad_input, grad_kernel)


def skip_fuse(coarse_scores: np.ndarray, fine_scores: np.ndarray) -> np.ndarray:
    """Sum an upsampled coarse score map with a finer one of identical shape."""
    if coarse_scores.shape != fine_scores.shape:
        raise ShapeMismatchError("skip_fuse fine scores", coarse_scores.shape, fine_scores.shape)
    return coarse_scores + fine_scores


def skip_fuse_backward(grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out
