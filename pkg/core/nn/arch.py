"""
Network assembly and the staged FCN fine-tuning protocol.

Architectures (miniature, same topology as the full-size originals):
    mini CNN   3 x (conv3 -> relu -> maxpool2) -> fc -> relu -> dropout -> fc(head)
    mini FCN   5 x (conv3 -> relu -> maxpool2) -> fc6 (conv3) -> fc7 (conv1) -> score_fr (conv1, head)
               FCN-32s upsamples score_fr by 32
               FCN-16s adds score_pool4 (zero-initialized) upsampled by 16, summed in
               FCN-8s  adds score_pool3 (zero-initialized) upsampled by 8, summed in

Skip fusion happens at full resolution, so a child variant whose new score
layers are zero computes exactly what its parent computes.
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.logging import get_logger, log_execution_time
from core.models.layers import (
    ConvLayer,
    DropoutLayer,
    FcLayer,
    FlattenLayer,
    FuseLayer,
    MaxPoolLayer,
    NetworkSpec,
    ReluLayer,
    UpsampleLayer,
)
from core.models.training import FcnTrainingConfig, InitScheme
from core.nn.checkpoint import Checkpoint, write_checkpoint
from core.nn.init import init_parameters
from core.nn.network import Network
from core.nn.optim import Example, TrainingDivergedError, train_epochs, write_loss_history

logger = get_logger("arch")


# ============================================================================
# ENUMS AND CONSTANTS
# ============================================================================

class FcnVariant(str, Enum):
    """FCN variants, named by the coarsest upsampling stride."""
    FCN32S = "fcn32s"
    FCN16S = "fcn16s"
    FCN8S = "fcn8s"

    @property
    def skips(self) -> Tuple[str, ...]:
        """Pooling stages tapped by skip-score layers (A = pool4, B = pool3)."""
        return {"fcn32s": (), "fcn16s": ("pool4",), "fcn8s": ("pool4", "pool3")}[self.value]


FCN_TOTAL_STRIDE = 32
CNN_POOL_STRIDE = 8


# ============================================================================
# BUILDERS
# ============================================================================

def build_mini_cnn(
    input_size: int,
    n_cl: int,
    widths: Sequence[int] = (8, 16, 32),
    hidden: int = 64,
    dropout: float = 0.5,
    in_channels: int = 1,
) -> NetworkSpec:
    """
    Object classifier: three conv/pool stages and two fully-connected layers.

    Args:
        input_size: square input side in px (>= 16)
        n_cl: number of constituent classes (head width)
        widths: channels of the three convolution stages
        hidden: width of the first fully-connected layer
        dropout: dropout rate applied before the final fully-connected layer

    Raises:
        ValueError: input too small for three 2x pools
    """
    if input_size < 16:
        raise ValueError(f"mini CNN needs input_size >= 16 px for three pools, got {input_size}")
    if len(widths) != 3:
        raise ValueError(f"mini CNN takes three stage widths, got {tuple(widths)}")

    layers = []
    prev = in_channels
    for i, width in enumerate(widths, start=1):
        layers += [
            ConvLayer(name=f"conv{i}", in_channels=prev, out_channels=width, kernel_size=3, padding=1),
            ReluLayer(name=f"relu{i}"),
            MaxPoolLayer(name=f"pool{i}", window=2, stride=2),
        ]
        prev = width
    side = input_size // CNN_POOL_STRIDE
    layers += [
        FlattenLayer(name="flatten"),
        FcLayer(name="fc1", in_features=prev * side * side, out_features=hidden),
        ReluLayer(name="relu_fc1"),
        DropoutLayer(name="drop1", rate=dropout),
        FcLayer(name="fc2", in_features=hidden, out_features=n_cl, head=True),
    ]
    return NetworkSpec(
        name="mini-cnn",
        input_shape=(in_channels, input_size, input_size),
        n_classes=n_cl,
        total_stride=CNN_POOL_STRIDE,
        fully_convolutional=False,
        layers=layers,
    )


def mini_cnn_parameter_count(input_size: int, n_cl: int, widths: Sequence[int] = (8, 16, 32),
                             hidden: int = 64, in_channels: int = 1) -> int:
    """Closed-form parameter count of build_mini_cnn."""
    total = 0
    prev = in_channels
    for width in widths:
        total += prev * width * 9 + width
        prev = width
    side = input_size // CNN_POOL_STRIDE
    total += prev * side * side * hidden + hidden
    total += hidden * n_cl + n_cl
    return total


def build_mini_fcn(
    variant: FcnVariant,
    n_cl: int,
    widths: Sequence[int] = (8, 16, 32, 32, 32),
    head_width: int = 64,
    dropout: float = 0.5,
    learn_upsampling: bool = False,
    input_size: int = 64,
    in_channels: int = 1,
) -> NetworkSpec:
    """
    Fully convolutional segmenter scoring n_cl constituent classes plus the matrix.

    Output shape is (n, n_cl + 1, H, W) for any H, W divisible by 32.

    Args:
        variant: FCN-32s, FCN-16s or FCN-8s
        n_cl: number of constituent classes (channel 0 is the matrix)
        widths: channels of the five encoder stages
        head_width: channels of the convolutionalized fc6/fc7
        dropout: rate after fc6 and fc7
        learn_upsampling: make the upsampling kernels trainable parameters
        input_size: side the graph is validated at (any multiple of 32 runs)
    """
    variant = FcnVariant(variant)
    if len(widths) != 5:
        raise ValueError(f"mini FCN takes five stage widths, got {tuple(widths)}")
    if input_size % FCN_TOTAL_STRIDE:
        raise ValueError(f"mini FCN input_size must be a multiple of {FCN_TOTAL_STRIDE}, got {input_size}")
    n_out = n_cl + 1

    layers: list = []
    prev = in_channels
    for i, width in enumerate(widths, start=1):
        layers += [
            ConvLayer(name=f"conv{i}", in_channels=prev, out_channels=width, kernel_size=3, padding=1),
            ReluLayer(name=f"relu{i}"),
            MaxPoolLayer(name=f"pool{i}", window=2, stride=2),
        ]
        prev = width

    layers += [
        ConvLayer(name="fc6", in_channels=prev, out_channels=head_width, kernel_size=3, padding=1),
        ReluLayer(name="relu6"),
        DropoutLayer(name="drop6", rate=dropout),
        ConvLayer(name="fc7", in_channels=head_width, out_channels=head_width, kernel_size=1),
        ReluLayer(name="relu7"),
        DropoutLayer(name="drop7", rate=dropout),
        ConvLayer(name="score_fr", in_channels=head_width, out_channels=n_out, kernel_size=1, head=True),
        UpsampleLayer(name="upscore32", channels=n_out, factor=32, trainable=learn_upsampling),
    ]

    fused = "upscore32"
    for tap, factor in zip(variant.skips, (16, 8)):
        stage = int(tap[-1])
        layers += [
            ConvLayer(name=f"score_{tap}", inputs=[tap], in_channels=widths[stage - 1],
                      out_channels=n_out, kernel_size=1, zero_init=True),
            UpsampleLayer(name=f"upscore{factor}", channels=n_out, factor=factor, trainable=learn_upsampling),
            FuseLayer(name=f"fuse_{tap}", inputs=[fused, f"upscore{factor}"]),
        ]
        fused = f"fuse_{tap}"

    return NetworkSpec(
        name=variant.value,
        input_shape=(in_channels, input_size, input_size),
        n_classes=n_out,
        total_stride=FCN_TOTAL_STRIDE,
        fully_convolutional=True,
        layers=layers,
    )


def fcn_spec_from_config(variant: FcnVariant, n_cl: int, config: FcnTrainingConfig, input_size: int) -> NetworkSpec:
    return build_mini_fcn(
        variant,
        n_cl,
        widths=config.widths,
        head_width=config.head_width,
        dropout=config.dropout,
        learn_upsampling=config.learn_upsampling,
        input_size=input_size,
    )


# ============================================================================
# STRIDE PADDING
# ============================================================================

class StridePadding(NamedTuple):
    top: int
    bottom: int
    left: int
    right: int

    def crop(self, y: np.ndarray) -> np.ndarray:
        h, w = y.shape[-2:]
        return y[..., self.top:h - self.bottom, self.left:w - self.right]


def pad_to_stride(x: np.ndarray, stride: int) -> Tuple[np.ndarray, StridePadding]:
    """Zero-pad (n, c, h, w) symmetrically so h and w become multiples of stride."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    pad = StridePadding(ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph == 0 and pw == 0:
        return x, pad
    widths = [(0, 0)] * (x.ndim - 2) + [(pad.top, pad.bottom), (pad.left, pad.right)]
    return np.pad(x, widths), pad


def fcn_scores(net: Network, x: np.ndarray) -> np.ndarray:
    """Eval-mode scores for any input size; non-multiples of the total stride are padded and cropped back."""
    padded, pad = pad_to_stride(x, net.total_stride)
    return pad.crop(net.forward(padded, train=False).output)


# ============================================================================
# STAGED TRAINING
# ============================================================================

def transfer_parameters(parent: Dict[str, np.ndarray], child: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Overwrite child parameters with parent ones of the same name and shape."""
    merged = dict(child)
    for name, value in parent.items():
        if name in merged and merged[name].shape == value.shape:
            merged[name] = value.copy()
    return merged


@dataclass
class StageReport:
    variant: str
    iterations: int
    final_loss: Optional[float]
    diverged: bool = False
    loss_history: List[Tuple[int, float]] = field(default_factory=list)


@dataclass
class StagedTrainingResult:
    """Checkpoint of the last successful stage plus one report per attempted stage."""
    checkpoint: Checkpoint
    stages: List[StageReport]
    checkpoints: Dict[str, Checkpoint] = field(default_factory=dict)

    @property
    def final_variant(self) -> str:
        return self.checkpoint.spec.name


@log_execution_time(logger)
def staged_train(
    dataset: Sequence[Example],
    config: FcnTrainingConfig,
    n_cl: int,
    seed: int = 0,
    dtype: np.dtype = np.float64,
    input_size: int = 64,
    initial: Optional[Checkpoint] = None,
    out_dir: Optional[Path] = None,
) -> StagedTrainingResult:
    """
    Train FCN-32s, then FCN-16s from it, then FCN-8s from that.

    Each child starts from its parent's parameters with its new skip-score
    layers at zero, so it begins as exactly the parent's function. When a
    stage diverges the previous stage's checkpoint (or `initial`) is kept
    and the run stops.

    Args:
        dataset: (image patch (1, P, P), label map (P, P)) pairs
        config: stages (variant + SGD each) and architecture knobs
        n_cl: number of constituent classes
        seed: run seed (initialization, visiting order, dropout)
        dtype: parameter precision
        input_size: patch side
        initial: optional checkpoint to start the first stage from
        out_dir: when given, each stage writes <variant>.ckpt and <variant>_loss.csv here

    Returns:
        StagedTrainingResult

    Raises:
        TrainingDivergedError: the first stage diverged and no initial checkpoint was given
    """
    reports: List[StageReport] = []
    checkpoints: Dict[str, Checkpoint] = {}
    parent: Optional[Checkpoint] = initial

    for index, stage in enumerate(config.stages):
        spec = fcn_spec_from_config(FcnVariant(stage.variant), n_cl, config, input_size)
        params = init_parameters(spec, seed=seed, scheme=config.init_scheme, dtype=dtype)
        if parent is not None:
            params = transfer_parameters(parent.params, params)
        net = Network(spec, params, dtype=dtype, seed=seed)

        logger.info(
            f"Stage {index + 1}/{len(config.stages)}: {stage.variant}",
            extra={"stage": stage.variant, "learning_rate": stage.sgd.learning_rate,
                   "iterations": stage.sgd.max_iterations},
        )
        try:
            outcome = train_epochs(net, dataset, stage.sgd, rng_seed=seed + index)
        except TrainingDivergedError as e:
            reports.append(StageReport(stage.variant, e.iteration, None, diverged=True, loss_history=e.loss_history))
            logger.error(
                f"Stage {stage.variant} diverged, keeping previous stage",
                exc_info=True,
                extra={"stage": stage.variant, "iteration": e.iteration},
            )
            if not checkpoints and initial is None:
                raise
            break

        history = outcome.loss_history
        reports.append(StageReport(
            variant=stage.variant,
            iterations=outcome.state.iteration,
            final_loss=history[-1][1] if history else None,
            loss_history=list(history),
        ))
        ckpt = Checkpoint.from_network(net, outcome.state, metadata={"stage": stage.variant, "seed": seed})
        checkpoints[stage.variant] = ckpt
        if out_dir is not None:
            write_checkpoint(ckpt, Path(out_dir) / f"{stage.variant}.ckpt")
            write_loss_history(Path(out_dir) / f"{stage.variant}_loss.csv", history)
        parent = ckpt

    if not checkpoints:
        logger.warning("No stage completed, returning the initial checkpoint", extra={"stage": initial.spec.name})
        return StagedTrainingResult(checkpoint=initial, stages=reports)
    last = list(checkpoints.values())[-1]
    return StagedTrainingResult(checkpoint=last, stages=reports, checkpoints=checkpoints)


def network_for_variant(
    variant: str,
    n_cl: int,
    config: FcnTrainingConfig,
    seed: int = 0,
    dtype: np.dtype = np.float64,
    input_size: int = 64,
    init_scheme: Optional[InitScheme] = None,
) -> Network:
    """Freshly initialized network for any FCN variant name."""
    spec = fcn_spec_from_config(FcnVariant(variant), n_cl, config, input_size)
    params = init_parameters(spec, seed=seed, scheme=init_scheme or config.init_scheme, dtype=dtype)
    return Network(spec, params, dtype=dtype, seed=seed)
