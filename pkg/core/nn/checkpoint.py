"""
Checkpoint file format.

    magic   b"MVFC"
    u32     format version (little-endian)
    u32     header length in bytes
    header  UTF-8 JSON: spec, spec_digest, tensor directory
            [{name, shape, dtype, offset, nbytes}], iteration, payload_sha256, metadata
    payload little-endian float tensors in directory order

Single-precision networks store "<f4" payloads, double-precision networks "<f8",
so a save/load round trip is bit-exact either way. Optimizer velocities are
stored as extra tensors named "velocity/<parameter>".

Files are written to a temporary sibling and renamed into place; loads
validate the whole file before building anything.
"""
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from core.logging import get_logger
from core.models.layers import NetworkSpec
from core.nn.init import init_parameters, parameter_rng
from core.nn.network import Network
from core.nn.optim import TrainState

logger = get_logger("checkpoint")

MAGIC = b"MVFC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
VELOCITY_PREFIX = "velocity/"
HEAD_SIGMA = 0.01


class CheckpointError(ValueError):
    """A checkpoint file could not be used; `reason` says why."""

    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass
class Checkpoint:
    """Spec, named parameters, and optional optimizer state."""
    spec: NetworkSpec
    params: Dict[str, np.ndarray]
    iteration: int = 0
    velocity: Optional[Dict[str, np.ndarray]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def to_network(self, seed: int = 0, dtype: Optional[np.dtype] = None) -> Network:
        return Network(self.spec, self.params, dtype=dtype or self.dtype, seed=seed)

    def train_state(self) -> TrainState:
        velocity = self.velocity or {name: np.zeros_like(v) for name, v in self.params.items()}
        return TrainState(iteration=self.iteration, velocity={k: v.copy() for k, v in velocity.items()})

    @classmethod
    def from_network(cls, net: Network, state: Optional[TrainState] = None,
                     metadata: Optional[Dict[str, Any]] = None) -> "Checkpoint":
        return cls(
            spec=net.spec,
            params=net.snapshot(),
            iteration=state.iteration if state else 0,
            velocity={k: v.copy() for k, v in state.velocity.items()} if state and state.velocity else None,
            metadata=dict(metadata or {}),
        )


def _tensor_dtype(array: np.ndarray) -> str:
    return "<f4" if array.dtype == np.float32 else "<f8"


def save_checkpoint(
    net: Network,
    state: Optional[TrainState],
    path: Path,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Serialize parameters (and velocities when state is given) atomically.

    Returns:
        The written path
    """
    return write_checkpoint(Checkpoint.from_network(net, state, metadata), path)


def write_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path = Path(path)
    tensors = dict(ckpt.params)
    if ckpt.velocity:
        tensors.update({VELOCITY_PREFIX + name: v for name, v in ckpt.velocity.items()})

    directory = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        array = tensors[name]
        dtype = _tensor_dtype(array)
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()
        directory.append({
            "name": name,
            "shape": list(array.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    header = {
        "spec": ckpt.spec.model_dump(mode="json"),
        "spec_digest": ckpt.spec.digest(),
        "tensors": directory,
        "iteration": int(ckpt.iteration),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": ckpt.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    logger.info("Checkpoint written", extra={"path": str(path), "spec": ckpt.spec.name,
                                             "iteration": ckpt.iteration, "bytes": len(payload)})
    return path


def _read(path: Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(path, "truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(path, f"unsupported format version {version}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise CheckpointError(path, "truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        spec = NetworkSpec.model_validate(header["spec"])
        directory = header["tensors"]
        digest = header["spec_digest"]
        payload_hash = header["payload_sha256"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(path, f"unreadable header ({e.__class__.__name__})") from e

    if spec.digest() != digest:
        raise CheckpointError(path, "spec digest does not match the embedded spec")

    payload = blob[start:]
    expected_len = sum(entry["nbytes"] for entry in directory)
    if len(payload) != expected_len:
        raise CheckpointError(path, f"payload is {len(payload)} bytes, directory needs {expected_len}")
    if hashlib.sha256(payload).hexdigest() != payload_hash:
        raise CheckpointError(path, "payload checksum mismatch")

    shapes = spec.parameter_shapes()
    params: Dict[str, np.ndarray] = {}
    velocity: Dict[str, np.ndarray] = {}
    for entry in directory:
        name = entry["name"]
        if entry["dtype"] not in ("<f4", "<f8"):
            raise CheckpointError(path, f"tensor '{name}' has unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != count * np.dtype(entry["dtype"]).itemsize:
            raise CheckpointError(path, f"tensor '{name}' declares {nbytes} bytes for shape {entry['shape']}")
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(
                path, f"tensor '{name}' spans bytes {offset}..{offset + nbytes} of a {len(payload)}-byte payload"
            )
        array = np.frombuffer(payload, dtype=entry["dtype"], count=count, offset=offset).reshape(entry["shape"])
        target = velocity if name.startswith(VELOCITY_PREFIX) else params
        key = name[len(VELOCITY_PREFIX):] if name.startswith(VELOCITY_PREFIX) else name
        if key in target:
            raise CheckpointError(path, f"tensor '{name}' appears twice")
        if key not in shapes or tuple(array.shape) != tuple(shapes[key]):
            raise CheckpointError(path, f"tensor '{name}' does not match the network spec")
        target[key] = array.astype(array.dtype.newbyteorder("="), copy=True)

    missing = sorted(set(shapes) - set(params))
    if missing:
        raise CheckpointError(path, f"missing parameters {missing}")

    return Checkpoint(
        spec=spec,
        params=params,
        iteration=int(header.get("iteration", 0)),
        velocity=velocity or None,
        metadata=header.get("metadata") or {},
    )


def reinit_head(
    params: Dict[str, np.ndarray],
    target: NetworkSpec,
    seed: int = 0,
    sigma: float = HEAD_SIGMA,
) -> Dict[str, np.ndarray]:
    """
    Fine-tuning transfer: copy every parameter whose name and shape match the
    target spec and redraw the classifier head weights from N(0, sigma^2), bias 0.

    Target parameters with no match start from the default initialization.
    """
    dtype = next(iter(params.values())).dtype if params else np.float64
    fresh = init_parameters(target, seed=seed, dtype=dtype)
    shapes = target.parameter_shapes()
    for name, shape in shapes.items():
        if name in params and tuple(params[name].shape) == tuple(shape):
            fresh[name] = params[name].copy()

    head = target.head_layer()
    w_name, b_name = f"{head.name}.weight", f"{head.name}.bias"
    fresh[w_name] = parameter_rng(seed, w_name).normal(0.0, sigma, size=shapes[w_name]).astype(dtype)
    fresh[b_name] = np.zeros(shapes[b_name], dtype=dtype)
    return fresh


def load_checkpoint(
    path: Path,
    spec: Optional[NetworkSpec] = None,
    reinit_head_layer: bool = False,
    seed: int = 0,
) -> Checkpoint:
    """
    Read and validate a checkpoint.

    Args:
        path: checkpoint file
        spec: expected network spec; a different digest is rejected unless
            reinit_head_layer is set
        reinit_head_layer: transfer matching parameters onto `spec` and redraw its head
        seed: seed for the redrawn head

    Raises:
        CheckpointError: bad magic/version/digest/checksum, truncation or spec mismatch
        FileNotFoundError: path does not exist
    """
    path = Path(path)
    ckpt = _read(path)

    if reinit_head_layer:
        target = spec or ckpt.spec
        logger.info("Reinitializing classifier head", extra={"path": str(path), "target": target.name})
        return Checkpoint(
            spec=target,
            params=reinit_head(ckpt.params, target, seed=seed),
            iteration=0,
            velocity=None,
            metadata={**ckpt.metadata, "fine_tuned_from": ckpt.spec.digest()},
        )

    if spec is not None and spec.digest() != ckpt.spec.digest():
        raise CheckpointError(path, f"spec mismatch: file holds '{ckpt.spec.name}', expected '{spec.name}'")
    return ckpt
