"""
Momentum SGD with coupled weight decay, and the minibatch training loop.

    v <- mu * v - lr * (g + wd * w)
    w <- w + v

With mu = wd = 0 one step is plain gradient descent, w <- w - lr * g.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from core.logging import get_logger
from core.models.training import SgdConfig
from core.nn.layers import cross_entropy_loss, one_hot, softmax
from core.nn.network import Network
from core.nn.tensor import ShapeMismatchError, is_finite

logger = get_logger("optim")

# (input (c, h, w), target) where target is a class index or an (h, w) label map;
# negative targets mark unlabeled positions
Example = Tuple[np.ndarray, Union[int, np.ndarray]]


class NonFiniteGradientError(FloatingPointError):
    """sgd_step refused an update because a gradient held NaN or Inf."""

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for parameter '{parameter}'; step refused")


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; the network was restored to its last good parameters."""

    def __init__(self, iteration: int, loss_history: List[Tuple[int, float]], cause: str = "non-finite loss"):
        self.iteration = iteration
        self.loss_history = list(loss_history)
        super().__init__(f"training diverged at iteration {iteration} ({cause})")


@dataclass
class TrainState:
    """Iteration counter, one velocity buffer per parameter, and the loss trace."""
    iteration: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    loss_history: List[Tuple[int, float]] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray]) -> "TrainState":
        return cls(velocity={name: np.zeros_like(value) for name, value in params.items()})


class TrainOutcome(NamedTuple):
    network: Network
    loss_history: List[Tuple[int, float]]
    state: TrainState


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: TrainState,
    config: SgdConfig,
) -> TrainState:
    """
    Apply one momentum-SGD update in place.

    Every gradient is checked before anything is touched, so a refused step
    leaves both params and state unchanged.

    Raises:
        NonFiniteGradientError: a gradient contains NaN/Inf (names the parameter)
        ShapeMismatchError: a gradient's shape differs from its parameter's
    """
    for name, w in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter '{name}'")
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatchError(f"gradient of '{name}'", w.shape, g.shape)
        if not is_finite(g):
            logger.error("Refusing SGD step", extra={"parameter": name, "iteration": state.iteration})
            raise NonFiniteGradientError(name)

    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    for name, w in params.items():
        v = state.velocity.get(name)
        if v is None or v.shape != w.shape:
            v = np.zeros_like(w)
        v = mu * v - lr * (grads[name] + wd * w)
        state.velocity[name] = v.astype(w.dtype, copy=False)
        params[name] = w + state.velocity[name]
    state.iteration += 1
    return state


def _stack(batch: Sequence[Example], n_classes: int, dtype: np.dtype) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.asarray(item[0]) for item in batch]).astype(dtype, copy=False)
    labels = np.stack([np.asarray(item[1]) for item in batch])
    return x, one_hot(labels, n_classes, class_axis=1, dtype=dtype)


def train_epochs(
    net: Network,
    dataset: Sequence[Example],
    config: SgdConfig,
    rng_seed: int,
    state: Optional[TrainState] = None,
    on_iteration: Optional[Callable[[int, float], None]] = None,
) -> TrainOutcome:
    """
    Minibatch training: forward -> softmax -> cross-entropy -> backward -> sgd_step.

    Examples are visited in a seeded permutation, reshuffled every epoch, so
    the same (seed, config, dataset) always produces the same parameters.

    Args:
        net: network to train in place
        dataset: (input, target) pairs
        config: SGD hyperparameters and iteration budget
        rng_seed: seed for the visiting order and dropout streams
        state: resume from an existing state (velocities, iteration counter)
        on_iteration: callback receiving (iteration, loss)

    Returns:
        TrainOutcome(network, loss_history, state)

    Raises:
        TrainingDivergedError: loss became non-finite; net holds its last good parameters
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if state is None:
        state = TrainState.for_params(net.params)

    rng = np.random.default_rng(rng_seed)
    net.reseed(rng_seed)
    order = rng.permutation(len(dataset))
    cursor = 0
    n_classes = net.n_classes
    history = state.loss_history
    last_good: Optional[Dict[str, np.ndarray]] = None

    logger.info(
        "Training started",
        extra={
            "network": net.spec.name,
            "examples": len(dataset),
            "iterations": config.max_iterations,
            "learning_rate": config.learning_rate,
        },
    )

    for _ in range(config.max_iterations):
        batch = []
        while len(batch) < config.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            batch.append(dataset[order[cursor]])
            cursor += 1

        x, truth = _stack(batch, n_classes, net.dtype)
        fp = net.forward(x, train=True)
        if fp.output.shape != truth.shape:
            raise ShapeMismatchError("training targets", fp.output.shape, truth.shape)
        result = cross_entropy_loss(softmax(fp.output, axis=1), truth, class_axis=1,
                                    reduction=config.loss_reduction)
        iteration = state.iteration

        if not np.isfinite(result.loss):
            if last_good is not None:
                net.load_parameters(last_good)
            logger.error("Loss is not finite, restoring last good parameters",
                         extra={"iteration": iteration})
            raise TrainingDivergedError(iteration, history)

        last_good = net.snapshot()
        grads = net.backward(fp, result.grad_logits)
        try:
            sgd_step(net.params, grads, state, config)
        except NonFiniteGradientError as e:
            raise TrainingDivergedError(iteration, history, cause=str(e)) from e

        if not all(is_finite(value) for value in net.params.values()):
            net.load_parameters(last_good)
            logger.error("Parameters overflowed, restoring last good parameters",
                         extra={"iteration": iteration})
            raise TrainingDivergedError(iteration, history, cause="parameter overflow")

        history.append((iteration, float(result.loss)))
        logger.debug("iteration", extra={"iteration": iteration, "loss": result.loss})
        if (iteration + 1) % config.log_every == 0:
            logger.info(f"iteration {iteration + 1}: loss {result.loss:.5f}",
                        extra={"iteration": iteration + 1, "loss": result.loss})
        if on_iteration is not None:
            on_iteration(iteration, float(result.loss))

    return TrainOutcome(net, history, state)


def write_loss_history(path: Path, loss_history: Sequence[Tuple[int, float]]) -> Path:
    """Write `iteration,loss` CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iteration", "loss"])
        for iteration, loss in loss_history:
            writer.writerow([iteration, repr(float(loss))])
    return path
