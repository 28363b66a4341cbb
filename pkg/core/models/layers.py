"""
Network Spec Schema - ordered layer graph with named parameter tensors.

Architecture: Discriminated Union Pattern
- Every layer carries a `kind` literal that selects its hyperparameter model
- Layers are evaluated in list order; `inputs` names earlier layers
  (empty = previous layer, "input" = the network input)
- Parameter tensors are named "<layer>.weight", "<layer>.bias", "<layer>.kernel"
- The spec digest (sha256 of the canonical JSON) binds checkpoints to specs
"""
import hashlib
import json
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator


NETWORK_INPUT = "input"


# ============================================================================
# LAYER SPECS
# ============================================================================

class _LayerBase(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(..., min_length=1, description="Unique layer name, prefix of its parameter names")
    inputs: List[str] = Field(
        default_factory=list,
        description="Names of layers feeding this one; empty means the previous layer",
    )

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def output_shape(self, shapes: List[Tuple[int, int, int]]) -> Tuple[int, ...]:
        return shapes[0]


class ConvLayer(_LayerBase):
    """2-D convolution (also used for the 1x1 score layers of the FCN variants)."""
    kind: Literal["conv"] = "conv"
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    kernel_size: int = Field(..., ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    head: bool = Field(default=False, description="This layer produces the class scores")
    zero_init: bool = Field(default=False, description="Initialize weights to zero (new skip-score layers)")

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.kernel_size
        return {
            f"{self.name}.weight": (self.out_channels, self.in_channels, k, k),
            f"{self.name}.bias": (self.out_channels,),
        }

    def output_shape(self, shapes):
        c, h, w = shapes[0]
        if c != self.in_channels:
            raise ValueError(f"layer '{self.name}' expects {self.in_channels} channels, gets {c}")
        oh = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"layer '{self.name}' input {h}x{w} too small for kernel {self.kernel_size}")
        return (self.out_channels, oh, ow)


class ReluLayer(_LayerBase):
    kind: Literal["relu"] = "relu"


class MaxPoolLayer(_LayerBase):
    kind: Literal["maxpool"] = "maxpool"
    window: int = Field(default=2, ge=1)
    stride: int = Field(default=2, ge=1)

    def output_shape(self, shapes):
        c, h, w = shapes[0]
        if self.window > h or self.window > w:
            raise ValueError(f"layer '{self.name}' window {self.window} larger than input {h}x{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)


class FlattenLayer(_LayerBase):
    kind: Literal["flatten"] = "flatten"

    def output_shape(self, shapes):
        c, h, w = shapes[0]
        return (c * h * w,)


class FcLayer(_LayerBase):
    kind: Literal["fc"] = "fc"
    in_features: int = Field(..., ge=1)
    out_features: int = Field(..., ge=1)
    head: bool = False

    def parameter_shapes(self):
        return {
            f"{self.name}.weight": (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def output_shape(self, shapes):
        if len(shapes[0]) != 1 or shapes[0][0] != self.in_features:
            raise ValueError(f"layer '{self.name}' expects ({self.in_features},), gets {shapes[0]}")
        return (self.out_features,)


class DropoutLayer(_LayerBase):
    kind: Literal["dropout"] = "dropout"
    rate: float = Field(default=0.5, ge=0.0, lt=1.0)


class UpsampleLayer(_LayerBase):
    """Bilinear upsampling by an integer factor; the kernel is a parameter only when trainable."""
    kind: Literal["upsample"] = "upsample"
    channels: int = Field(..., ge=1)
    factor: int = Field(..., ge=1)
    trainable: bool = False

    def kernel_name(self) -> str:
        return f"{self.name}.kernel"

    def parameter_shapes(self):
        if not self.trainable:
            return {}
        return {self.kernel_name(): (self.channels, 2 * self.factor, 2 * self.factor)}

    def output_shape(self, shapes):
        c, h, w = shapes[0]
        if c != self.channels:
            raise ValueError(f"layer '{self.name}' expects {self.channels} channels, gets {c}")
        return (c, h * self.factor, w * self.factor)


class FuseLayer(_LayerBase):
    """Elementwise sum of two score maps [coarse, fine]."""
    kind: Literal["fuse"] = "fuse"

    @model_validator(mode="after")
    def _two_inputs(self):
        if len(self.inputs) != 2:
            raise ValueError(f"fuse layer '{self.name}' needs exactly two inputs, got {self.inputs}")
        return self

    def output_shape(self, shapes):
        if shapes[0] != shapes[1]:
            raise ValueError(f"fuse layer '{self.name}' shape mismatch {shapes[0]} vs {shapes[1]}")
        return shapes[0]


LayerSpec = Annotated[
    Union[ConvLayer, ReluLayer, MaxPoolLayer, FlattenLayer, FcLayer, DropoutLayer, UpsampleLayer, FuseLayer],
    Field(discriminator="kind"),
]


def is_classifier_head(layer) -> bool:
    return bool(getattr(layer, "head", False))


# ============================================================================
# NETWORK SPEC
# ============================================================================

class NetworkSpec(BaseModel):
    """
    Ordered layer graph.

    Examples:
        spec = build_mini_cnn(input_size=32, n_cl=4)
        spec.parameter_count()
        spec.digest()  # binds checkpoints to this exact graph
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(..., description="Architecture name, e.g. 'mini-cnn' or 'fcn8s'")
    input_shape: Tuple[int, int, int] = Field(..., description="(channels, height, width) the graph is validated at")
    n_classes: int = Field(..., ge=1, description="Width of the head output (score channels)")
    total_stride: int = Field(default=1, ge=1, description="Product of all downsampling strides")
    fully_convolutional: bool = Field(default=False, description="Accepts any H, W divisible by total_stride")
    layers: List[LayerSpec] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _validate_graph(self):
        seen = {NETWORK_INPUT}
        for layer in self.layers:
            if layer.name in seen:
                raise ValueError(f"duplicate layer name '{layer.name}'")
            for src in layer.inputs:
                if src not in seen:
                    raise ValueError(f"layer '{layer.name}' reads '{src}' which is not an earlier layer")
            seen.add(layer.name)

        heads = [layer.name for layer in self.layers if is_classifier_head(layer)]
        if len(heads) != 1:
            raise ValueError(f"network needs exactly one classifier head, found {heads}")

        out = self.output_shapes()[self.layers[-1].name]
        if out[0] != self.n_classes:
            raise ValueError(f"network output has {out[0]} channels, n_classes is {self.n_classes}")
        return self

    def resolve_inputs(self, index: int) -> List[str]:
        """Names feeding layer `index`, with the implicit previous-layer link made explicit."""
        layer = self.layers[index]
        if layer.inputs:
            return list(layer.inputs)
        return [self.layers[index - 1].name if index > 0 else NETWORK_INPUT]

    def output_shapes(self, hw: Optional[Tuple[int, int]] = None) -> Dict[str, Tuple[int, ...]]:
        """Per-layer activation shape (without batch) for an input of spatial size hw."""
        c = self.input_shape[0]
        h, w = hw if hw is not None else self.input_shape[1:]
        shapes: Dict[str, Tuple[int, ...]] = {NETWORK_INPUT: (c, h, w)}
        for i, layer in enumerate(self.layers):
            shapes[layer.name] = layer.output_shape([shapes[src] for src in self.resolve_inputs(i)])
        return shapes

    def head_layer(self) -> Union[ConvLayer, FcLayer]:
        return next(layer for layer in self.layers if is_classifier_head(layer))

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.parameter_shapes())
        return shapes

    def parameter_count(self) -> int:
        total = 0
        for shape in self.parameter_shapes().values():
            n = 1
            for d in shape:
                n *= d
            total += n
        return total

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()
