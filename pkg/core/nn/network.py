"""
Layer-graph executor.

A Network pairs a NetworkSpec with a dict of named parameter arrays and runs
the layer kernels of core.nn.layers in spec order. Forward passes in eval mode
are pure functions of (parameters, input) and may run concurrently; training
mutates parameters from a single writer (core.nn.optim).
"""
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from core.logging import get_logger
from core.models.layers import (
    NETWORK_INPUT,
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
from core.nn import layers as L
from core.nn.tensor import ShapeMismatchError, ensure_rank4

logger = get_logger("tensor-nn")


@dataclass
class ForwardPass:
    """Output plus everything backward() needs: per-layer inputs and kernel caches."""
    output: np.ndarray
    activations: Dict[str, np.ndarray]
    caches: Dict[str, Any] = field(default_factory=dict)


class Network:
    """
    Executable network.

    Example:
        spec = build_mini_fcn(FcnVariant.FCN8S, n_cl=4)
        net = Network(spec, init_parameters(spec, seed=7))
        scores = net.forward(x).output           # (n, n_cl + 1, H, W)
        grads = net.backward(fp, grad_logits)    # {"conv1_1.weight": ..., ...}
    """

    def __init__(
        self,
        spec: NetworkSpec,
        params: Dict[str, np.ndarray],
        dtype: np.dtype = np.float64,
        seed: int = 0,
    ):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        expected = spec.parameter_shapes()
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter set does not match spec '{spec.name}': missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeMismatchError(f"parameter '{name}'", shape, params[name].shape)
        self.params: Dict[str, np.ndarray] = {
            name: np.array(params[name], dtype=self.dtype, copy=True) for name in expected
        }
        self._fixed_kernels = {
            layer.name: L.bilinear_kernel(layer.factor, self.dtype)[None].repeat(layer.channels, axis=0)
            for layer in spec.layers
            if isinstance(layer, UpsampleLayer) and not layer.trainable
        }
        self.seed = seed
        self.reseed(seed)

    # ------------------------------------------------------------------
    # state helpers
    # ------------------------------------------------------------------

    def reseed(self, seed: int) -> None:
        """Reset every dropout stream; stream i is seeded from (seed, i)."""
        self.seed = seed
        self._dropout: Dict[str, L.DropoutState] = {}
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, DropoutLayer):
                self._dropout[layer.name] = L.DropoutState(
                    rate=layer.rate,
                    mode="train",
                    rng_seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                )

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def load_parameters(self, params: Dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter '{name}'")
            if value.shape != self.params[name].shape:
                raise ShapeMismatchError(f"parameter '{name}'", self.params[name].shape, value.shape)
            self.params[name] = np.array(value, dtype=self.dtype, copy=True)

    @property
    def total_stride(self) -> int:
        return self.spec.total_stride

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def _conv(self, layer: ConvLayer) -> L.ConvParams:
        return L.ConvParams(
            weights=self.params[f"{layer.name}.weight"],
            bias=self.params[f"{layer.name}.bias"],
            stride=layer.stride,
            padding=layer.padding,
        )

    def _fc(self, layer: FcLayer) -> L.FcParams:
        return L.FcParams(self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])

    def _upsample(self, layer: UpsampleLayer) -> L.UpsampleParams:
        if layer.trainable:
            kernel = self.params[layer.kernel_name()]
        else:
            kernel = self._fixed_kernels[layer.name]
        return L.UpsampleParams(factor=layer.factor, kernel=kernel, trainable=layer.trainable)

    def forward(self, x: np.ndarray, train: bool = False) -> ForwardPass:
        """
        Run the graph on a (n, c, h, w) batch.

        Args:
            x: input batch
            train: apply dropout (advances the dropout streams); eval mode is pure

        Returns:
            ForwardPass whose output is the head's raw scores (logits)
        """
        x = ensure_rank4(x).astype(self.dtype, copy=False)
        c, h, w = self.spec.input_shape
        if x.shape[1] != c:
            raise ShapeMismatchError("network input", (x.shape[0], c, h, w), x.shape)
        if not self.spec.fully_convolutional and x.shape[2:] != (h, w):
            raise ShapeMismatchError("network input", (x.shape[0], c, h, w), x.shape)

        acts: Dict[str, np.ndarray] = {NETWORK_INPUT: x}
        caches: Dict[str, Any] = {}
        for i, layer in enumerate(self.spec.layers):
            srcs = [acts[name] for name in self.spec.resolve_inputs(i)]
            a = srcs[0]
            if isinstance(layer, ConvLayer):
                out = L.conv2d_forward(a, self._conv(layer))
            elif isinstance(layer, ReluLayer):
                out = L.relu(a)
            elif isinstance(layer, MaxPoolLayer):
                out, caches[layer.name] = L.maxpool_forward(a, (layer.window, layer.window), layer.stride)
            elif isinstance(layer, FlattenLayer):
                out = a.reshape(a.shape[0], -1)
            elif isinstance(layer, FcLayer):
                out = L.fc_forward(a, self._fc(layer))
            elif isinstance(layer, DropoutLayer):
                if train:
                    out, caches[layer.name] = L.dropout_forward(a, self._dropout[layer.name])
                else:
                    out = a
            elif isinstance(layer, UpsampleLayer):
                out = L.upsample_forward(a, self._upsample(layer))
            elif isinstance(layer, FuseLayer):
                out = L.skip_fuse(srcs[0], srcs[1])
            else:  # pragma: no cover - the discriminated union is closed
                raise TypeError(f"unsupported layer kind {layer.kind}")
            acts[layer.name] = out.astype(self.dtype, copy=False)

        return ForwardPass(output=acts[self.spec.layers[-1].name], activations=acts, caches=caches)

    def backward(self, fp: ForwardPass, grad_output: np.ndarray) -> Dict[str, np.ndarray]:
        """
        Backpropagate d(loss)/d(output) through the graph.

        Returns:
            Gradient for every trainable parameter, keyed by parameter name
        """
        last = self.spec.layers[-1].name
        if grad_output.shape != fp.output.shape:
            raise ShapeMismatchError("network grad_output", fp.output.shape, grad_output.shape)

        grad_acts: Dict[str, np.ndarray] = {last: grad_output}
        grads: Dict[str, np.ndarray] = {}

        def push(name: str, g: np.ndarray) -> None:
            if name == NETWORK_INPUT:
                return
            if name in grad_acts:
                grad_acts[name] = grad_acts[name] + g
            else:
                grad_acts[name] = g

        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            g = grad_acts.pop(layer.name, None)
            if g is None:
                continue
            src_names = self.spec.resolve_inputs(i)
            a = fp.activations[src_names[0]]

            if isinstance(layer, ConvLayer):
                cg = L.conv2d_backward(a, self._conv(layer), g)
                grads[f"{layer.name}.weight"] = cg.grad_weights
                grads[f"{layer.name}.bias"] = cg.grad_bias
                push(src_names[0], cg.grad_input)
            elif isinstance(layer, ReluLayer):
                push(src_names[0], L.relu_backward(a, g))
            elif isinstance(layer, MaxPoolLayer):
                push(src_names[0], L.maxpool_backward(fp.caches[layer.name], g))
            elif isinstance(layer, FlattenLayer):
                push(src_names[0], g.reshape(a.shape))
            elif isinstance(layer, FcLayer):
                fg = L.fc_backward(a, self._fc(layer), g)
                grads[f"{layer.name}.weight"] = fg.grad_weights
                grads[f"{layer.name}.bias"] = fg.grad_bias
                push(src_names[0], fg.grad_input)
            elif isinstance(layer, DropoutLayer):
                push(src_names[0], L.dropout_backward(fp.caches.get(layer.name), g))
            elif isinstance(layer, UpsampleLayer):
                ug = L.upsample_backward(a, self._upsample(layer), g)
                if layer.trainable:
                    grads[layer.kernel_name()] = ug.grad_kernel
                push(src_names[0], ug.grad_input)
            elif isinstance(layer, FuseLayer):
                g_coarse, g_fine = L.skip_fuse_backward(g)
                push(src_names[0], g_coarse)
                push(src_names[1], g_fine)

        for name, value in self.params.items():
            grads.setdefault(name, np.zeros_like(value))
        return grads

    # ------------------------------------------------------------------
    # inference helpers
    # ------------------------------------------------------------------

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax over the class axis of the eval-mode output."""
        return L.softmax(self.forward(x, train=False).output, axis=1)
