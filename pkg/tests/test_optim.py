#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Test suite for momentum SGD, the training loop and the training configs.
"""
import sys
import tempfile
from pathlib import Path

# Add project root to path
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import numpy.testing as npt
import pytest
from pydantic import ValidationError

from core.models.layers import FcLayer, FlattenLayer, NetworkSpec
from core.models.training import (
    FULL_SCALE_FCN_STAGES,
    FULL_SCALE_OBJECT_CNN_SGD,
    VGG16_HEAD_WIDTH,
    VGG16_WIDTHS,
    FcnTrainingConfig,
    SgdConfig,
    StageConfig,
)
from core.nn.network import Network
from core.nn.optim import (
    NonFiniteGradientError,
    TrainingDivergedError,
    TrainState,
    sgd_step,
    train_epochs,
    write_loss_history,
)


def toy_network(seed: int = 0) -> Network:
    """Linear 2-class classifier over 2-pixel inputs."""
    spec = NetworkSpec(
        name="toy",
        input_shape=(1, 1, 2),
        n_classes=2,
        layers=[
            FlattenLayer(name="flat"),
            FcLayer(name="fc", in_features=2, out_features=2, head=True),
        ],
    )
    rng = np.random.default_rng(seed)
    params = {"fc.weight": rng.normal(0.0, 0.1, size=(2, 2)), "fc.bias": np.zeros(2)}
    return Network(spec, params)


def toy_dataset(n: int = 40, seed: int = 1):
    """Two separable clusters around (-1, -1) and (+1, +1)."""
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n):
        label = i % 2
        center = 1.0 if label else -1.0
        x = center + rng.normal(0.0, 0.2, size=2)
        data.append((x.reshape(1, 1, 2), label))
    return data


def test_sgd_step_examples():
    """Test single momentum-SGD steps against hand-evaluated updates."""
    print("\n=== Test 1: SGD Step Examples ===")

    params = {"w": np.array([1.0])}
    state = TrainState.for_params(params)
    sgd_step(params, {"w": np.array([1.0])}, state, SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    npt.assert_allclose(params["w"], [0.9])
    assert state.iteration == 1
    print("✓ Plain gradient step passed (w = 0.9)")

    params = {"w": np.array([1.0])}
    sgd_step(params, {"w": np.array([0.0])}, TrainState.for_params(params),
             SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5))
    npt.assert_allclose(params["w"], [0.95])
    print("✓ Weight decay step passed (w = 0.95)")

    params = {"w": np.array([0.3, -2.0])}
    sgd_step(params, {"w": np.zeros(2)}, TrainState.for_params(params),
             SgdConfig(learning_rate=0.5, momentum=0.7, weight_decay=0.0))
    npt.assert_array_equal(params["w"], [0.3, -2.0])
    print("✓ Fixed point passed")

    # momentum carries the previous velocity
    params = {"w": np.array([1.0])}
    state = TrainState.for_params(params)
    config = SgdConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.0)
    sgd_step(params, {"w": np.array([1.0])}, state, config)
    sgd_step(params, {"w": np.array([1.0])}, state, config)
    npt.assert_allclose(params["w"], [1.0 - 0.1 - 0.15])
    print("✓ Momentum accumulation passed")

    # quadratic 0.5 w^2 contracts for every lr < 2
    for lr in (0.1, 0.5, 1.0, 1.5, 1.99):
        w = np.array([3.0])
        params = {"w": w.copy()}
        sgd_step(params, {"w": w.copy()}, TrainState.for_params(params),
                 SgdConfig(learning_rate=lr, momentum=0.0, weight_decay=0.0))
        assert 0.5 * params["w"][0] ** 2 < 0.5 * w[0] ** 2, f"lr={lr} did not decrease the loss"
    print("✓ Quadratic contraction passed")


def test_sgd_step_refuses_non_finite():
    """Test that a NaN gradient leaves params and state untouched."""
    print("\n=== Test 2: Non-Finite Gradient ===")

    params = {"a": np.array([1.0, 2.0]), "b": np.array([3.0])}
    state = TrainState.for_params(params)
    with pytest.raises(NonFiniteGradientError) as info:
        sgd_step(params, {"a": np.array([0.1, 0.1]), "b": np.array([np.nan])}, state, SgdConfig())
    assert info.value.parameter == "b", f"Expected parameter 'b', got {info.value.parameter}"
    assert isinstance(info.value, FloatingPointError)
    npt.assert_array_equal(params["a"], [1.0, 2.0])
    assert state.iteration == 0
    npt.assert_array_equal(state.velocity["a"], [0.0, 0.0])
    print("✓ Non-finite gradient refused")


def test_train_epochs_toy_problem():
    """Test that training lowers the loss and is deterministic per seed."""
    print("\n=== Test 3: Training Loop ===")

    config = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0, max_iterations=200, batch_size=4)
    data = toy_dataset()

    outcome = train_epochs(toy_network(), data, config, rng_seed=5)
    history = outcome.loss_history
    assert len(history) == 200
    assert [it for it, _ in history] == list(range(200))
    final = np.mean([loss for _, loss in history[-20:]])
    assert final < history[0][1], f"Loss did not decrease: {history[0][1]} -> {final}"
    print(f"✓ Loss decreased ({history[0][1]:.4f} -> {final:.4f})")

    again = train_epochs(toy_network(), data, config, rng_seed=5)
    assert again.loss_history == history, "Same seed should give the same loss history"
    for name in outcome.network.params:
        npt.assert_array_equal(outcome.network.params[name], again.network.params[name])
    print("✓ Determinism passed")

    frozen = toy_network()
    before = frozen.snapshot()
    train_epochs(frozen, data, SgdConfig(learning_rate=0.0, max_iterations=25), rng_seed=5)
    for name, value in before.items():
        npt.assert_array_equal(frozen.params[name], value)
    print("✓ Zero learning rate keeps parameters")

    with pytest.raises(ValueError):
        train_epochs(toy_network(), [], config, rng_seed=0)


def test_divergence_restores_parameters():
    """Test that an exploding run raises and leaves finite parameters."""
    print("\n=== Test 4: Divergence ===")

    net = toy_network()
    config = SgdConfig(learning_rate=1e308, momentum=0.9, weight_decay=0.0, max_iterations=50, batch_size=4)
    with pytest.raises(TrainingDivergedError) as info:
        train_epochs(net, toy_dataset(), config, rng_seed=3)
    assert isinstance(info.value, RuntimeError)
    assert info.value.iteration >= 0
    for name, value in net.params.items():
        assert np.all(np.isfinite(value)), f"Parameter {name} not restored to finite values"
    print(f"✓ Divergence detected at iteration {info.value.iteration}")


def test_loss_history_csv():
    """Test the iteration,loss CSV format."""
    print("\n=== Test 5: Loss History CSV ===")

    with tempfile.TemporaryDirectory() as tmp:
        path = write_loss_history(Path(tmp) / "loss.csv", [(0, 0.5), (1, 0.25)])
        lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["iteration,loss", "0,0.5", "1,0.25"], f"Unexpected CSV: {lines}"
    print("✓ Loss history CSV passed")


def test_config_validation():
    """Test SGD ranges and the staged learning-rate contract."""
    print("\n=== Test 6: Config Validation ===")

    for bad in ({"learning_rate": -1.0}, {"momentum": 1.0}, {"weight_decay": -0.1}, {"batch_size": 0}):
        with pytest.raises(ValidationError):
            SgdConfig(**bad)
    assert SgdConfig(learning_rate=0.0, max_iterations=0).max_iterations == 0
    print("✓ SGD ranges passed")

    def stages(*rates):
        return [StageConfig(variant=v, sgd=SgdConfig(learning_rate=lr))
                for v, lr in zip(("fcn32s", "fcn16s", "fcn8s"), rates)]

    FcnTrainingConfig(stages=stages(1e-2, 1e-3, 1e-4))
    for rates in ((1e-3, 1e-3, 1e-4), (1e-3, 1e-2)):
        with pytest.raises(ValidationError):
            FcnTrainingConfig(stages=stages(*rates))
    with pytest.raises(ValidationError):
        FcnTrainingConfig(stages=[StageConfig(variant="fcn16s", sgd=SgdConfig())])

    full = FcnTrainingConfig(stages=list(FULL_SCALE_FCN_STAGES), widths=VGG16_WIDTHS, head_width=VGG16_HEAD_WIDTH)
    assert [s.sgd.loss_reduction for s in full.stages] == ["sum"] * 3
    assert FULL_SCALE_OBJECT_CNN_SGD.weight_decay == 0.004
    print("✓ Staged learning-rate contract passed")


def main():
    """Run all tests."""
    print("=" * 70)
    print("OPTIMIZER TESTS")
    print("=" * 70)

    tests = [
        test_sgd_step_examples,
        test_sgd_step_refuses_non_finite,
        test_train_epochs_toy_problem,
        test_divergence_restores_parameters,
        test_loss_history_csv,
        test_config_validation,
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
