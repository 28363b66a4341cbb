"""
Run Configuration Schema - every knob of a synth/train/segment/classify/evaluate run.

Architecture: nested pydantic models, JSON in and JSON out
- RunConfig is loaded from --config, CLI flags override fields, and the
  resolved model is written next to the outputs as run.json
- Desk-scale defaults are tuned for minutes-long CPU runs; the original
  full-scale hyperparameters are kept as named presets
"""
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


# ============================================================================
# ENUMS AND CONSTANTS
# ============================================================================

FcnVariantName = Literal["fcn32s", "fcn16s", "fcn8s"]
VariantName = Literal["fcn32s", "fcn16s", "fcn8s", "cnn"]
PrecisionName = Literal["float32", "float64"]
InitScheme = Literal["he", "gaussian"]
"""
Weight initialization:
- he: N(0, 2 / fan_in), the desk-scale default
- gaussian: N(0, 1e-4^2) on the first convolution and N(0, 0.01^2) elsewhere
"""
LossReduction = Literal["mean", "sum"]
MaskPolarity = Literal["dark", "bright"]

STAGE_ORDER: Tuple[str, ...] = ("fcn32s", "fcn16s", "fcn8s")


# ============================================================================
# OPTIMIZER
# ============================================================================

class SgdConfig(BaseModel):
    """
    Momentum SGD with coupled weight decay: v <- mu*v - lr*(g + wd*w); w <- w + v.

    A learning rate of 0 and zero iterations are accepted; both give frozen runs.
    """

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=5e-3, ge=0.0, description="Step size eta")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="Momentum mu")
    weight_decay: float = Field(default=5e-4, ge=0.0, description="L2 coefficient lambda")
    max_iterations: int = Field(default=1000, ge=0, description="Minibatch updates to run")
    batch_size: int = Field(default=1, ge=1)
    loss_reduction: LossReduction = Field(
        default="mean",
        description="'mean' averages cross-entropy over labeled pixels, 'sum' adds them",
    )
    log_every: int = Field(default=100, ge=1, description="INFO progress line period")


class StageConfig(BaseModel):
    """One stage of the staged FCN protocol."""

    model_config = ConfigDict(extra="forbid")

    variant: FcnVariantName
    sgd: SgdConfig


# Full-scale recipes, kept for reference runs
FULL_SCALE_OBJECT_CNN_SGD = SgdConfig(learning_rate=0.001, momentum=0.9, weight_decay=0.004, max_iterations=7000)
FULL_SCALE_FCN_STAGES: Tuple[StageConfig, ...] = tuple(
    StageConfig(
        variant=variant,
        sgd=SgdConfig(learning_rate=lr, momentum=0.9, weight_decay=5e-4, max_iterations=7000,
                      batch_size=1, loss_reduction="sum"),
    )
    for variant, lr in zip(STAGE_ORDER, (1e-10, 1e-11, 3e-12))
)
VGG16_WIDTHS: Tuple[int, ...] = (64, 128, 256, 512, 512)
VGG16_HEAD_WIDTH = 4096


def _default_stages() -> List[StageConfig]:
    return [
        StageConfig(variant="fcn32s", sgd=SgdConfig(learning_rate=5e-3, max_iterations=2400)),
        StageConfig(variant="fcn16s", sgd=SgdConfig(learning_rate=2.5e-3, max_iterations=1200)),
        StageConfig(variant="fcn8s", sgd=SgdConfig(learning_rate=1e-3, max_iterations=1200)),
    ]


# ============================================================================
# TRAINING CONFIGS
# ============================================================================

class FcnTrainingConfig(BaseModel):
    """
    Staged FCN training: FCN-32s, then FCN-16s initialized from it, then FCN-8s.

    Stage variants must follow fcn32s -> fcn16s -> fcn8s (a prefix of it) and
    learning rates must strictly decrease from stage to stage.
    """

    model_config = ConfigDict(extra="forbid")

    stages: List[StageConfig] = Field(default_factory=_default_stages, min_length=1)
    widths: Tuple[int, int, int, int, int] = Field(default=(8, 16, 32, 32, 32), description="Encoder stage widths")
    head_width: int = Field(default=64, ge=1, description="Width of the convolutionalized fc6/fc7")
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    learn_upsampling: bool = Field(default=False, description="Train the upsampling kernels")
    init_scheme: InitScheme = "he"
    balancing_target: int = Field(default=48, ge=1, description="Training patches per class")
    balance: bool = Field(
        default=True,
        description="Per-class stride balancing; off takes every non-overlapping patch of every image",
    )

    @model_validator(mode="after")
    def _check_stages(self):
        variants = tuple(stage.variant for stage in self.stages)
        if variants != STAGE_ORDER[: len(variants)]:
            raise ValueError(f"stages must follow {list(STAGE_ORDER)} in order, got {list(variants)}")
        rates = [stage.sgd.learning_rate for stage in self.stages]
        for prev, nxt in zip(rates, rates[1:]):
            if not nxt < prev:
                raise ValueError(f"stage learning rates must strictly decrease, got {rates}")
        return self


class CnnTrainingConfig(BaseModel):
    """Object-based CNN: masked object crops warped to input_size x input_size."""

    model_config = ConfigDict(extra="forbid")

    input_size: int = Field(default=32, ge=16)
    widths: Tuple[int, int, int] = (8, 16, 32)
    hidden: int = Field(default=64, ge=1)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    crop_pad: int = Field(default=2, ge=0, description="Context pixels around each object bbox")
    init_scheme: InitScheme = "he"
    sgd: SgdConfig = Field(
        default_factory=lambda: SgdConfig(learning_rate=1e-3, momentum=0.9, weight_decay=0.004,
                                          max_iterations=3000, batch_size=8)
    )


class SynthConfig(BaseModel):
    """
    Synthetic micrograph generator.

    Each image is a bright noisy matrix with dark non-overlapping elliptical
    objects, all of one constituent class, filled with that class's texture.
    """

    model_config = ConfigDict(extra="forbid")

    rng_seed: int = Field(default=7, ge=0)
    height: int = Field(default=192, ge=16)
    width: int = Field(default=192, ge=16)
    objects_per_image: int = Field(default=8, ge=0)
    object_size: Tuple[int, int] = Field(default=(18, 40), description="Min/max object diameter in px")
    noise_sigma: float = Field(default=4.0, ge=0.0)
    matrix_level: int = Field(default=200, ge=0, le=255)
    threshold: int = Field(default=170, ge=0, le=255, description="Mask threshold separating objects from matrix")
    n_train: int = Field(default=11, ge=0)
    n_test: int = Field(default=10, ge=0)
    n_classes: int = Field(default=4, ge=1, le=4)
    max_placement_retries: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _check_sizes(self):
        lo, hi = self.object_size
        if not 14 <= lo <= hi:
            raise ValueError(f"object_size must satisfy 14 <= min <= max, got {self.object_size}")
        if hi + 8 > min(self.height, self.width):
            raise ValueError(f"objects up to {hi} px do not fit a {self.height}x{self.width} image")
        if not 21 <= self.threshold < self.matrix_level:
            raise ValueError(
                f"threshold {self.threshold} must be >= 21 and below matrix_level {self.matrix_level}"
            )
        return self


# ============================================================================
# RUN CONFIG
# ============================================================================

RUN_JSON_EXCLUDE = {"threads", "out"}


class RunConfig(BaseModel):
    """
    Resolved run configuration, written to <out>/run.json by every subcommand.

    Examples:
        cfg = RunConfig.from_file("c.json").merged(seed=3, threads=4)
        cfg.write(out_dir / "run.json")
    """

    model_config = ConfigDict(extra="forbid")

    # --- PATHS ---
    dataset: Optional[str] = Field(default=None, description="Dataset manifest JSON")
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint to load")
    out: Optional[str] = Field(default=None, description="Output directory")

    # --- MODEL ---
    variant: VariantName = "fcn8s"
    precision: PrecisionName = "float32"
    seed: int = Field(default=7, ge=0)
    threads: int = Field(default=1, ge=1)

    # --- TILING / OBJECTS ---
    patch: int = Field(default=64, ge=1, description="Square patch side for training and inference tiles")
    stride: Optional[int] = Field(default=None, ge=1, description="Inference tile stride; defaults to patch")
    augment: bool = Field(default=True, description="Add 90/180/270 degree rotations of training patches")
    mask_threshold: int = Field(default=170, ge=0, le=255)
    mask_polarity: MaskPolarity = "dark"
    min_object_area: int = Field(default=30, ge=1)

    # --- SUB-CONFIGS ---
    fcn: FcnTrainingConfig = Field(default_factory=FcnTrainingConfig)
    cnn: CnnTrainingConfig = Field(default_factory=CnnTrainingConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @model_validator(mode="after")
    def _check_tiling(self):
        if self.stride is not None and self.stride > self.patch:
            raise ValueError(f"inference stride {self.stride} exceeds patch {self.patch}")
        return self

    @property
    def inference_stride(self) -> int:
        return self.stride if self.stride is not None else self.patch

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate(json.load(f))

    def merged(self, **overrides) -> "RunConfig":
        """Apply non-None overrides and re-validate."""
        data = self.model_dump(mode="json")
        data.update({key: value for key, value in overrides.items() if value is not None})
        return RunConfig.model_validate(data)

    def to_json(self) -> str:
        # execution-only settings stay out so reruns with other workers or
        # output dirs write identical files
        data = self.model_dump(mode="json", exclude=RUN_JSON_EXCLUDE)
        return json.dumps(data, sort_keys=True, indent=2) + "\n"

    def write(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding="utf-8")
