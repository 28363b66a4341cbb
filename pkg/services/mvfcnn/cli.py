"""
MVFCNN Command-Line Interface

Single entry point for the micrograph workflow: synthesize a dataset, train a
segmenter (staged FCN) or an object classifier (mini CNN), segment images,
classify objects and images, and evaluate predictions against the truth.

Usage:
    # Synthetic dataset (11 train / 10 test images)
    python services/mvfcnn/cli.py synth --out runs/data

    # Staged FCN-32s -> 16s -> 8s training
    python services/mvfcnn/cli.py train --dataset runs/data --variant fcn8s --out runs/train

    # Max-vote classification of the test split
    python services/mvfcnn/cli.py classify --dataset runs/data --checkpoint runs/train/fcn8s.ckpt --out runs/classify

    # Metrics of predicted label maps
    python services/mvfcnn/cli.py evaluate --dataset runs/data --predictions runs/classify --out runs/eval
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

# Add project root to path
project_root = Path(__file__).resolve().parent.parent.parent
sys.path.insert(0, str(project_root))

from pydantic import ValidationError

from core.config import config
from core.logging import get_logger
from core.models.training import RunConfig
from core.nn.checkpoint import CheckpointError
from services.mvfcnn import commands

# Initialize logger
logger = get_logger("mvfcnn-cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

SUBCOMMANDS = ("synth", "train", "segment", "classify", "evaluate")


# ============================================================================
# ARGUMENTS
# ============================================================================

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Run configuration JSON (flags override it)")
    parser.add_argument("--out", help="Output directory; run.json and all results go here")
    parser.add_argument("--seed", type=int, help="Run seed (initialization, shuffling, dropout, synthesis)")
    parser.add_argument(
        "--threads",
        type=int,
        help=f"Worker cap for tile inference and data generation (default: MVFCNN_THREADS={config.DEFAULT_THREADS})",
    )
    parser.add_argument("--dataset", help="Dataset manifest JSON, or the directory holding manifest.json")
    parser.add_argument("--checkpoint", help="Checkpoint to load")
    parser.add_argument(
        "--variant",
        choices=["fcn32s", "fcn16s", "fcn8s", "cnn"],
        help="Network to train (fcn* runs the FCN stages up to it; cnn trains the object classifier)",
    )
    parser.add_argument("--patch", type=int, help="Square patch side in px for training and inference tiles")
    parser.add_argument("--stride", type=int, help="Inference tile stride in px (default: patch)")
    parser.add_argument("--precision", choices=["float32", "float64"], help="Training precision")


def _add_split(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--split", choices=["train", "test"], default="test", help="Dataset split (default: test)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvfcnn",
        description="MVFCNN - micrograph segmentation and max-vote object classification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic dataset with a fixed seed, 4 generation workers
  python services/mvfcnn/cli.py synth --seed 7 --threads 4 --out runs/data

  # Staged FCN training from a config file, overriding the patch size
  python services/mvfcnn/cli.py train --config run.json --dataset runs/data --patch 64 --out runs/train

  # Unbalanced training set (every non-overlapping patch of every image)
  python services/mvfcnn/cli.py train --dataset runs/data --no-balance --out runs/train_unbalanced

  # Object-based mini CNN baseline
  python services/mvfcnn/cli.py train --dataset runs/data --variant cnn --out runs/cnn

  # Label maps with overlapping tiles
  python services/mvfcnn/cli.py segment --dataset runs/data --checkpoint runs/train/fcn8s.ckpt --stride 32 --out runs/seg

  # Truth vs truth sanity check (all metrics 1.0)
  python services/mvfcnn/cli.py evaluate --dataset runs/data --predictions runs/data/manifest.json --out runs/self

Environment:
  MVFCNN_LOG=DEBUG      per-iteration training loss
  MVFCNN_LOG_JSON=1     structured JSON log lines on stderr
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    synth = sub.add_parser("synth", help="Generate the synthetic micrograph dataset")
    _add_common(synth)

    train = sub.add_parser("train", help="Train the staged FCN or the object CNN on the train split")
    _add_common(train)
    train.add_argument("--no-augment", action="store_true", help="Skip the 90/180/270 degree rotations")
    train.add_argument(
        "--no-balance",
        action="store_true",
        help="Tile every training image at stride = patch instead of balancing patches per class",
    )

    segment = sub.add_parser("segment", help="Write label maps for every image of a split")
    _add_common(segment)
    _add_split(segment)

    classify = sub.add_parser("classify", help="Classify objects and whole images of a split")
    _add_common(classify)
    _add_split(classify)

    evaluate = sub.add_parser("evaluate", help="Pixel, object and image metrics against the truth")
    _add_common(evaluate)
    _add_split(evaluate)
    evaluate.add_argument(
        "--predictions",
        type=Path,
        required=True,
        help="Directory of <name>_labels.png (or its labels/ subdirectory), or a dataset manifest",
    )
    return parser


# ============================================================================
# CONFIGURATION
# ============================================================================

def resolve_run(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults), then flag overrides; flags win."""
    base = RunConfig.from_file(args.config) if args.config else RunConfig()

    threads = args.threads
    if threads is None and not args.config:
        threads = config.DEFAULT_THREADS

    overrides = {
        "out": args.out,
        "seed": args.seed,
        "threads": threads,
        "dataset": args.dataset,
        "checkpoint": args.checkpoint,
        "variant": args.variant,
        "patch": args.patch,
        "stride": args.stride,
        "precision": args.precision,
    }
    if args.seed is not None:
        overrides["synth"] = base.synth.model_copy(update={"rng_seed": args.seed}).model_dump(mode="json")
    if getattr(args, "no_augment", False):
        overrides["augment"] = False
    if getattr(args, "no_balance", False):
        overrides["fcn"] = base.fcn.model_copy(update={"balance": False}).model_dump(mode="json")
    return base.merged(**overrides)


def describe_error(error: Exception) -> str:
    """One line for stderr."""
    if isinstance(error, ValidationError):
        parts = [
            f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}"
            for err in error.errors()
        ]
        return "invalid configuration: " + "; ".join(parts)
    return " ".join(str(error).split()) or type(error).__name__


# ============================================================================
# DISPATCH
# ============================================================================

def _execute(args: argparse.Namespace, run: RunConfig) -> commands.Summary:
    if args.command == "synth":
        return commands.run_synth(run)
    if args.command == "train":
        return commands.run_train(run)
    if args.command == "segment":
        return commands.run_segment(run, split=args.split)
    if args.command == "classify":
        return commands.run_classify(run, split=args.split)
    if args.command == "evaluate":
        return commands.run_evaluate(run, args.predictions, split=args.split)
    raise ValueError(f"unknown subcommand '{args.command}'")


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv, run one subcommand, and return its exit status.

    Returns:
        0 on success (and for --help), 2 for usage, configuration, input-file
        and checkpoint errors, 1 for anything else
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    try:
        run = resolve_run(args)

        logger.info("=" * 60)
        logger.info(f"MVFCNN - {args.command.upper()}")
        logger.info("=" * 60)
        logger.info(
            "Starting run",
            extra={
                "command": args.command,
                "out": run.out,
                "variant": run.variant,
                "seed": run.seed,
                "threads": run.threads,
                "patch": run.patch,
                "stride": run.inference_stride,
            },
        )

        summary = _execute(args, run)

    except (ValidationError, CheckpointError, FileNotFoundError, ValueError) as e:
        logger.debug("Run rejected", exc_info=True, extra={"command": args.command})
        print(f"mvfcnn {args.command}: error: {describe_error(e)}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        return EXIT_FAILURE
    except Exception:
        logger.critical("Fatal error", exc_info=True, extra={"command": args.command})
        return EXIT_FAILURE

    # Run summary
    logger.info("=" * 60)
    logger.info(f"{args.command.upper()} SUMMARY")
    logger.info("=" * 60)
    for key, value in summary.items():
        logger.info(f"{key}: {value}")

    print("\n" + "=" * 60)
    print(f"✓ {args.command} complete")
    print("=" * 60)
    for key, value in summary.items():
        print(f"  {key}: {value}")
    print(f"  outputs: {run.out}")
    return EXIT_OK


def main():
    """Main CLI entry point."""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
