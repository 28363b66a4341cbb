#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Test suite for checkpoint persistence and head reinitialization.
"""
import json
import sys
import tempfile
from pathlib import Path

# Add project root to path
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import numpy.testing as npt
import pytest

from core.nn.arch import build_mini_cnn
from core.nn.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from core.nn.init import init_parameters
from core.nn.network import Network
from core.nn.optim import TrainState


def small_network(n_cl: int = 3, dtype=np.float64, seed: int = 0) -> Network:
    spec = build_mini_cnn(16, n_cl, widths=(2, 2, 2), hidden=6)
    return Network(spec, init_parameters(spec, seed=seed, dtype=dtype), dtype=dtype)


def saved(tmp: str, net: Network, name: str = "model.ckpt") -> Path:
    rng = np.random.default_rng(4)
    state = TrainState(iteration=17, velocity={k: rng.normal(size=v.shape).astype(v.dtype) for k, v in net.params.items()})
    return save_checkpoint(net, state, Path(tmp) / name, metadata={"stage": "cnn", "seed": 3})


def with_directory(blob: bytes, index: int, **changes) -> bytes:
    """Same file with one tensor directory entry edited; payload and checksum untouched."""
    header_len = int.from_bytes(blob[8:12], "little")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    header["tensors"][index].update(changes)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return blob[:8] + len(header_bytes).to_bytes(4, "little") + header_bytes + blob[12 + header_len:]


def test_round_trip_is_bit_exact():
    """Test that parameters, velocities and metadata survive a save/load."""
    print("\n=== Test 1: Round Trip ===")

    for dtype in (np.float64, np.float32):
        net = small_network(dtype=dtype)
        with tempfile.TemporaryDirectory() as tmp:
            path = saved(tmp, net)
            ckpt = load_checkpoint(path, spec=net.spec)
            rewritten = saved(tmp, ckpt.to_network(), name="again.ckpt")
            assert path.read_bytes() == rewritten.read_bytes(), "Rewriting a loaded checkpoint changed its bytes"

        assert ckpt.iteration == 17 and ckpt.metadata == {"stage": "cnn", "seed": 3}
        assert ckpt.dtype == dtype
        for name, value in net.params.items():
            npt.assert_array_equal(ckpt.params[name], value)
            assert ckpt.params[name].dtype == dtype
        assert set(ckpt.velocity) == set(net.params)
        state = ckpt.train_state()
        assert state.iteration == 17
        npt.assert_array_equal(state.velocity["fc2.weight"], ckpt.velocity["fc2.weight"])
        print(f"✓ {np.dtype(dtype).name} round trip passed")

    # without a train state no velocities are stored
    net = small_network()
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = load_checkpoint(save_checkpoint(net, None, Path(tmp) / "bare.ckpt"))
    assert ckpt.velocity is None and ckpt.iteration == 0
    npt.assert_array_equal(ckpt.train_state().velocity["conv1.weight"], np.zeros_like(net.params["conv1.weight"]))
    print("✓ Parameters-only checkpoint passed")


def test_corruption_is_rejected():
    """Test flipped payload bytes, truncation, bad magic, out-of-range tensor entries and missing files."""
    print("\n=== Test 2: Corruption ===")

    net = small_network()
    with tempfile.TemporaryDirectory() as tmp:
        path = saved(tmp, net)
        blob = path.read_bytes()
        assert blob[:4] == MAGIC

        cases = {
            "flipped payload byte": blob[:-5] + bytes([blob[-5] ^ 0xFF]) + blob[-4:],
            "truncated payload": blob[:-8],
            "truncated prefix": blob[:6],
            "bad magic": b"XXXX" + blob[4:],
            "bad version": blob[:4] + (99).to_bytes(4, "little") + blob[8:],
            "offset past payload end": with_directory(blob, 0, offset=len(blob)),
            "negative offset": with_directory(blob, 0, offset=-8),
        }
        for label, data in cases.items():
            broken = Path(tmp) / "broken.ckpt"
            broken.write_bytes(data)
            with pytest.raises(CheckpointError) as info:
                load_checkpoint(broken)
            assert info.value.path == broken
            print(f"✓ {label} rejected: {info.value.reason}")
            if "offset" in label:
                assert "spans bytes" in info.value.reason, info.value.reason

        with pytest.raises(FileNotFoundError):
            load_checkpoint(Path(tmp) / "missing.ckpt")

    assert issubclass(CheckpointError, ValueError)


def test_spec_mismatch():
    """Test that a checkpoint only loads into the graph it was written from."""
    print("\n=== Test 3: Spec Mismatch ===")

    net = small_network(n_cl=3)
    other = build_mini_cnn(16, 4, widths=(2, 2, 2), hidden=6)
    with tempfile.TemporaryDirectory() as tmp:
        path = saved(tmp, net)
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(path, spec=other)
        assert "spec mismatch" in info.value.reason

        # a tensor whose shape disagrees with the embedded spec
        bad = Checkpoint(spec=other, params=dict(net.params))
        with pytest.raises(CheckpointError):
            load_checkpoint(write_checkpoint(bad, Path(tmp) / "bad.ckpt"))
    print("✓ Spec mismatch rejected")


def test_head_reinitialization():
    """Test fine-tuning transfer: matching layers copied, head redrawn from N(0, 0.01^2)."""
    print("\n=== Test 4: Head Reinitialization ===")

    spec = build_mini_cnn(16, 4, widths=(1, 1, 1), hidden=2500)
    net = Network(spec, init_parameters(spec, seed=1))
    assert net.params["fc2.weight"].size == 10_000

    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(net, None, Path(tmp) / "pretrained.ckpt")
        ckpt = load_checkpoint(path, reinit_head_layer=True, seed=7)
        head = ckpt.params["fc2.weight"]
        assert abs(float(head.mean())) < 1e-3, f"Head mean {head.mean():.5f} not near 0"
        assert abs(float(head.std()) - 0.01) < 2e-3, f"Head std {head.std():.5f} not near 0.01"
        npt.assert_array_equal(ckpt.params["fc2.bias"], np.zeros(4))
        npt.assert_array_equal(ckpt.params["fc1.weight"], net.params["fc1.weight"])
        assert ckpt.metadata["fine_tuned_from"] == spec.digest()
        print(f"✓ Same-shape head redrawn (mean {head.mean():+.5f}, std {head.std():.5f})")

        # new class count: the head changes shape, the body transfers
        target = build_mini_cnn(16, 3, widths=(1, 1, 1), hidden=2500)
        tuned = load_checkpoint(path, spec=target, reinit_head_layer=True, seed=7)
        assert tuned.spec.digest() == target.digest()
        assert tuned.params["fc2.weight"].shape == (3, 2500)
        for name in ("conv1.weight", "conv3.bias", "fc1.weight", "fc1.bias"):
            npt.assert_array_equal(tuned.params[name], net.params[name])
        assert tuned.to_network().forward(np.zeros((1, 1, 16, 16))).output.shape == (1, 3)
    print("✓ Head reinitialized onto a new class count")


def main():
    """Run all tests."""
    print("=" * 70)
    print("CHECKPOINT TESTS")
    print("=" * 70)

    tests = [
        test_round_trip_is_bit_exact,
        test_corruption_is_rejected,
        test_spec_mismatch,
        test_head_reinitialization,
    ]

    passed = 0
    failed = 0

    for test in tests:
        try:
            test()
            passed += 1
        except Exception as e:
            failed += 1
            print(f"✗ Test failed: {test.__name__}")
            print(f"   Error: {e}")

    print("\n" + "=" * 70)
    print(f"SUMMARY: {passed} passed, {failed} failed")
    print("=" * 70)

    return failed == 0


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
