"""
Subcommand bodies for the mvfcnn CLI.

Each command takes the resolved RunConfig (plus the few per-command options
that are not part of it), writes everything under run.out, starting with
run.json, and returns a summary dict for the console report.
"""
import csv
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from core.imaging.io import load_sample, read_gray, write_color_map, write_gray
from core.imaging.objects import ObjectRegion, connected_components, region_truth, threshold_mask
from core.logging import get_logger, log_execution_time
from core.metrics import (
    ConfusionMatrix,
    confusion_from_labels,
    image_metrics,
    object_confusion,
    object_report_from_confusion,
    pixel_metrics,
    write_report,
)
from core.models.micrograph import (
    MATRIX_CLASS,
    DatasetManifest,
    MicrographSample,
    Split,
)
from core.models.results import ImageClassification, MetricsReport, ObjectClassification
from core.models.training import RunConfig
from core.nn.checkpoint import Checkpoint, load_checkpoint
from core.pipeline.classifier import CnnObjectClassifier
from core.pipeline.segmentation import classify_whole_image, segment_image, vote_objects
from core.pipeline.training import train_object_classifier, train_segmenter
from core.synth import generate_dataset

logger = get_logger("mvfcnn-cli")

Summary = Dict[str, object]


# ============================================================================
# SHARED HELPERS
# ============================================================================

def output_dir(run: RunConfig) -> Path:
    if not run.out:
        raise ValueError("--out is required")
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "run.json")
    return out


def load_manifest(run: RunConfig) -> DatasetManifest:
    if not run.dataset:
        raise ValueError("--dataset is required")
    path = Path(run.dataset)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return DatasetManifest.load(path)


def iter_samples(manifest: DatasetManifest, split: Split) -> Iterator[MicrographSample]:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"dataset has no '{split}' samples")
    for entry in entries:
        yield load_sample(manifest, entry)


def load_model(run: RunConfig) -> Checkpoint:
    if not run.checkpoint:
        raise ValueError("--checkpoint is required")
    return load_checkpoint(Path(run.checkpoint))


def object_regions(sample: MicrographSample, run: RunConfig) -> List[ObjectRegion]:
    """Objects as the deployed pipeline sees them: threshold, then 4-connected components."""
    mask = threshold_mask(sample.image, run.mask_threshold, run.mask_polarity)
    return connected_components(mask, run.min_object_area)


def _format_class(value: Optional[int]) -> str:
    return "unclassifiable" if value is None else str(value)


def write_images_csv(path: Path, rows: List[Tuple[str, Optional[int], ImageClassification]]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image", "true_class", "voted_class"])
        for name, truth, result in rows:
            writer.writerow([name, _format_class(truth), _format_class(result.voted_class)])
    return path


def write_objects_csv(path: Path, objects: List[ObjectClassification], names: List[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["object_id", "voted_class", "area"] + [f"votes_{name}" for name in names])
        for obj in objects:
            writer.writerow([obj.region_id, obj.voted_class, obj.area] + list(obj.votes))
    return path


def vote_map(shape: Tuple[int, int], regions: List[ObjectRegion],
             objects: List[ObjectClassification]) -> np.ndarray:
    """Every object's pixels painted with its voted class; matrix stays 0, not-segmented -1."""
    out = np.full(shape, MATRIX_CLASS, dtype=np.int64)
    for region, obj in zip(regions, objects):
        out[region.rows, region.cols] = obj.voted_class
    return out


def _require_fcn(ckpt: Checkpoint) -> None:
    if not ckpt.spec.fully_convolutional:
        raise ValueError(f"checkpoint network '{ckpt.spec.name}' is not fully convolutional")


# ============================================================================
# SYNTH
# ============================================================================

def run_synth(run: RunConfig) -> Summary:
    out = output_dir(run)
    manifest = generate_dataset(run.synth, out, threads=run.threads)
    return {
        "samples": len(manifest.entries),
        "train": len(manifest.split("train")),
        "test": len(manifest.split("test")),
        "objects": dict(manifest.class_object_totals),
        "manifest": str(out / "manifest.json"),
    }


# ============================================================================
# TRAIN
# ============================================================================

@log_execution_time(logger)
def run_train(run: RunConfig) -> Summary:
    out = output_dir(run)
    manifest = load_manifest(run)
    samples = list(iter_samples(manifest, "train"))
    initial = load_model(run) if run.checkpoint else None

    if run.variant == "cnn":
        net, outcome = train_object_classifier(samples, run, manifest.n_classes, out_dir=out, initial=initial)
        history = outcome.loss_history
        return {
            "variant": "cnn",
            "iterations": outcome.state.iteration,
            "final_loss": history[-1][1] if history else None,
            "checkpoint": str(out / "cnn.ckpt"),
        }

    result = train_segmenter(samples, run, manifest.n_classes, out_dir=out, initial=initial)
    for report in result.stages:
        logger.info(
            f"Stage {report.variant} finished",
            extra={"stage": report.variant, "iterations": report.iterations,
                   "final_loss": report.final_loss, "diverged": report.diverged},
        )
    if result.final_variant != run.variant:
        logger.warning(
            "Training stopped before the requested variant",
            extra={"requested": run.variant, "final": result.final_variant},
        )
    return {
        "variant": result.final_variant,
        "stages": [report.variant for report in result.stages if not report.diverged],
        "final_loss": result.stages[-1].final_loss,
        "checkpoint": str(out / f"{result.final_variant}.ckpt" if result.checkpoints else run.checkpoint),
    }


# ============================================================================
# SEGMENT
# ============================================================================

@log_execution_time(logger)
def run_segment(run: RunConfig, split: Split = "test") -> Summary:
    out = output_dir(run)
    manifest = load_manifest(run)
    ckpt = load_model(run)
    _require_fcn(ckpt)
    net = ckpt.to_network(seed=run.seed)

    count = 0
    for sample in iter_samples(manifest, split):
        seg = segment_image(net, sample.image, run.patch, run.inference_stride, threads=run.threads)
        write_gray(out / "labels" / f"{sample.name}_labels.png", seg.label_map.astype(np.uint8))
        write_color_map(out / "color" / f"{sample.name}_color.png", seg.label_map)
        logger.info("Segmented image", extra={"sample": sample.name, "variant": ckpt.spec.name})
        count += 1
    return {"images": count, "variant": ckpt.spec.name, "labels": str(out / "labels")}


# ============================================================================
# CLASSIFY
# ============================================================================

def _cnn_objects(classifier: CnnObjectClassifier, sample: MicrographSample,
                 regions: List[ObjectRegion], n_cl: int) -> List[ObjectClassification]:
    """CNN decisions in the max-vote record shape; the winner gets the single vote."""
    objects = []
    for region, pred in zip(regions, classifier.classify_all(sample, regions)):
        votes = [0] * (n_cl + 1)
        votes[pred.label] = 1
        objects.append(ObjectClassification(region_id=region.id, voted_class=pred.label,
                                            votes=votes, area=region.area))
    return objects


@log_execution_time(logger)
def run_classify(run: RunConfig, split: Split = "test") -> Summary:
    """
    Classify every object of every image in the split, then every image.

    FCN checkpoints go through segmentation and max voting; a mini CNN
    checkpoint classifies each warped object crop directly.
    """
    out = output_dir(run)
    manifest = load_manifest(run)
    ckpt = load_model(run)
    n_cl = manifest.n_classes
    net = ckpt.to_network(seed=run.seed)
    classifier = None if ckpt.spec.fully_convolutional else CnnObjectClassifier(net, pad=run.cnn.crop_pad)

    pairs: List[Tuple[int, int]] = []
    image_rows: List[Tuple[str, Optional[int], ImageClassification]] = []
    for sample in iter_samples(manifest, split):
        regions = object_regions(sample, run)
        if classifier is None:
            seg = segment_image(net, sample.image, run.patch, run.inference_stride, threads=run.threads)
            write_gray(out / "labels" / f"{sample.name}_labels.png", seg.label_map.astype(np.uint8))
            objects = vote_objects(seg.label_map, regions, seg.n_channels)
        else:
            objects = _cnn_objects(classifier, sample, regions, n_cl)

        write_objects_csv(out / "objects" / f"{sample.name}_objects.csv", objects, manifest.class_names)
        write_color_map(out / "votes" / f"{sample.name}_votes.png", vote_map(sample.image.shape, regions, objects))

        for region, obj in zip(regions, objects):
            truth = region_truth(sample.label_map, region)
            # threshold blobs over matrix-only truth have nothing to be scored against
            if truth != MATRIX_CLASS:
                pairs.append((truth, obj.voted_class))
        image_result = classify_whole_image(objects, n_cl)
        image_rows.append((sample.name, sample.sample_class, image_result))
        logger.info(
            "Classified image",
            extra={"sample": sample.name, "objects": len(objects), "voted_class": image_result.voted_class},
        )

    write_images_csv(out / "images.csv", image_rows)
    cm, not_segmented = object_confusion(pairs, n_cl, manifest.class_names)
    cm.write_csv(out / "object_confusion.csv")
    report = MetricsReport(
        class_names=cm.class_names,
        objects=object_report_from_confusion(cm, not_segmented),
        images=image_metrics([(truth, result) for _, truth, result in image_rows]),
    )
    write_report(report, out)
    return {
        "images": len(image_rows),
        "objects": len(pairs),
        "object_accuracy": report.objects.accuracy_excluding_not_segmented,
        "image_accuracy": report.images.accuracy,
    }


# ============================================================================
# EVALUATE
# ============================================================================

def prediction_source(path: Path):
    """
    Map a sample name to its predicted label map.

    path is either a dataset manifest (its label maps are the predictions)
    or a directory holding <name>_labels.png, directly or under labels/.
    """
    path = Path(path)
    if path.is_file():
        predicted = DatasetManifest.load(path)
        by_name = {entry.name: entry for entry in predicted.entries}

        def from_manifest(name: str) -> np.ndarray:
            if name not in by_name:
                raise FileNotFoundError(f"no prediction for '{name}' in {path}")
            return read_gray(predicted.resolve(by_name[name].label_map))

        return from_manifest

    if not path.is_dir():
        raise FileNotFoundError(f"predictions not found: {path}")
    base = path / "labels" if (path / "labels").is_dir() else path

    def from_directory(name: str) -> np.ndarray:
        return read_gray(base / f"{name}_labels.png")

    return from_directory


@log_execution_time(logger)
def run_evaluate(run: RunConfig, predictions: Path, split: Split = "test") -> Summary:
    """
    Pixel, object and image metrics of predicted label maps against the truth.

    Objects are the ground-truth mask components so the scores do not depend
    on the threshold used at classification time.
    """
    out = output_dir(run)
    manifest = load_manifest(run)
    predicted_labels = prediction_source(predictions)
    n_cl = manifest.n_classes
    names = manifest.class_names

    pixel_cm: Optional[ConfusionMatrix] = None
    pairs: List[Tuple[int, int]] = []
    image_rows: List[Tuple[str, Optional[int], ImageClassification]] = []
    for sample in iter_samples(manifest, split):
        labels = predicted_labels(sample.name).astype(np.int64)
        cm = confusion_from_labels(sample.label_map, labels, n_cl + 1, names)
        pixel_cm = cm if pixel_cm is None else pixel_cm + cm

        regions = connected_components(sample.mask, run.min_object_area)
        objects = vote_objects(labels, regions, n_cl + 1)
        for region, obj in zip(regions, objects):
            truth = region_truth(sample.label_map, region)
            if truth != MATRIX_CLASS:
                pairs.append((truth, obj.voted_class))
        image_rows.append((sample.name, sample.sample_class, classify_whole_image(objects, n_cl)))

    object_cm, not_segmented = object_confusion(pairs, n_cl, names)
    pixel_cm.write_csv(out / "pixel_confusion.csv")
    object_cm.write_csv(out / "object_confusion.csv")
    write_images_csv(out / "images.csv", image_rows)

    report = MetricsReport(
        class_names=names,
        pixel=pixel_metrics(pixel_cm),
        objects=object_report_from_confusion(object_cm, not_segmented),
        images=image_metrics([(truth, result) for _, truth, result in image_rows]),
    )
    write_report(report, out)
    return {
        "images": len(image_rows),
        "pixel_acc": report.pixel.pixel_acc,
        "mean_iu": report.pixel.mean_iu,
        "object_accuracy": report.objects.accuracy_excluding_not_segmented,
        "image_accuracy": report.images.accuracy,
    }

