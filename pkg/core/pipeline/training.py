"""
Training orchestration for both classification paths.

    train_segmenter            balanced or grid patches -> (rotations) -> staged FCN-32s/16s/8s
    train_object_classifier    object crops -> (rotations) -> mini CNN
"""
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.imaging.patches import augment_rotations, extract_balanced_patches, extract_grid_patches, normalize_image
from core.logging import get_logger, log_execution_time
from core.models.micrograph import MicrographSample
from core.models.training import STAGE_ORDER, RunConfig
from core.nn.arch import StagedTrainingResult, build_mini_cnn, staged_train
from core.nn.checkpoint import Checkpoint, save_checkpoint
from core.nn.init import init_parameters
from core.nn.network import Network
from core.nn.optim import Example, TrainOutcome, train_epochs, write_loss_history
from core.nn.tensor import resolve_dtype
from core.pipeline.classifier import build_object_dataset

logger = get_logger("pipeline")


def group_by_class(samples: Sequence[MicrographSample]) -> Dict[int, List[MicrographSample]]:
    groups: Dict[int, List[MicrographSample]] = defaultdict(list)
    for sample in samples:
        if sample.sample_class is None:
            raise ValueError(f"sample '{sample.name}' has no sample_class; stride balancing needs one per image")
        groups[sample.sample_class].append(sample)
    return dict(groups)


def build_fcn_dataset(
    samples: Sequence[MicrographSample],
    patch: int,
    balancing_target: int,
    seed: int,
    augment: bool = True,
    dtype: np.dtype = np.float64,
    balance: bool = True,
) -> List[Example]:
    """
    (image patch, label patch) examples, optionally with rotations.

    balance=True draws balancing_target patches per image class at solved
    strides; balance=False tiles every image at stride = patch.
    """
    if balance:
        patches = extract_balanced_patches(group_by_class(samples), patch, balancing_target, seed)
    else:
        patches = extract_grid_patches(samples, patch)
    if augment:
        patches = augment_rotations(patches)
    examples = [(normalize_image(p.image, dtype)[None], p.labels.astype(np.int64)) for p in patches]
    logger.info("Segmentation patches ready",
                extra={"patches": len(examples), "augment": augment, "balance": balance})
    return examples


def stages_up_to(run: RunConfig) -> RunConfig:
    """Drop configured stages past the requested FCN variant."""
    if run.variant == "cnn":
        raise ValueError("variant 'cnn' has no FCN stages")
    last = STAGE_ORDER.index(run.variant)
    stages = [stage for stage in run.fcn.stages if STAGE_ORDER.index(stage.variant) <= last]
    return run.model_copy(update={"fcn": run.fcn.model_copy(update={"stages": stages})})


@log_execution_time(logger)
def train_segmenter(
    samples: Sequence[MicrographSample],
    run: RunConfig,
    n_cl: int,
    out_dir: Optional[Path] = None,
    initial: Optional[Checkpoint] = None,
) -> StagedTrainingResult:
    """Staged FCN training up to run.variant on balanced or grid-tiled (and augmented) patches."""
    run = stages_up_to(run)
    dtype = resolve_dtype(run.precision)
    dataset = build_fcn_dataset(
        samples, run.patch, run.fcn.balancing_target, run.seed, run.augment, dtype, balance=run.fcn.balance
    )
    return staged_train(
        dataset,
        run.fcn,
        n_cl=n_cl,
        seed=run.seed,
        dtype=dtype,
        input_size=run.patch,
        initial=initial,
        out_dir=out_dir,
    )


@log_execution_time(logger)
def train_object_classifier(
    samples: Sequence[MicrographSample],
    run: RunConfig,
    n_cl: int,
    out_dir: Optional[Path] = None,
    initial: Optional[Checkpoint] = None,
) -> Tuple[Network, TrainOutcome]:
    """Mini CNN on masked, warped object crops of the training samples."""
    cfg = run.cnn
    dtype = resolve_dtype(run.precision)
    spec = build_mini_cnn(cfg.input_size, n_cl, widths=cfg.widths, hidden=cfg.hidden, dropout=cfg.dropout)
    if initial is not None:
        net = initial.to_network(seed=run.seed, dtype=dtype)
    else:
        net = Network(spec, init_parameters(spec, run.seed, cfg.init_scheme, dtype), dtype=dtype, seed=run.seed)

    dataset = build_object_dataset(
        samples,
        cfg.input_size,
        pad=cfg.crop_pad,
        min_object_area=run.min_object_area,
        augment=run.augment,
        dtype=dtype,
    )
    outcome = train_epochs(net, dataset, cfg.sgd, rng_seed=run.seed)
    if out_dir is not None:
        save_checkpoint(net, outcome.state, Path(out_dir) / "cnn.ckpt", metadata={"stage": "cnn", "seed": run.seed})
        write_loss_history(Path(out_dir) / "cnn_loss.csv", outcome.loss_history)
    return net, outcome
