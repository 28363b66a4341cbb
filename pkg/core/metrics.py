"""
Segmentation and object-level evaluation.

With n_ij the number of pixels of true class i predicted as class j and
t_i = sum_j n_ij:

    pixel accuracy   sum_i n_ii / sum_i t_i
    mean accuracy    mean_i n_ii / t_i
    mean IU          mean_i n_ii / (t_i + sum_j n_ji - n_ii)
    fw IU            (sum_k t_k)^-1 sum_i t_i n_ii / (t_i + sum_j n_ji - n_ii)

Classes absent from the truth (t_i = 0) are left out of both means and the
fw IU sum.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.logging import get_logger
from core.models.micrograph import MATRIX_CLASS, NOT_SEGMENTED
from core.models.results import (
    ClassObjectMetrics,
    ClassPixelMetrics,
    ImageClassification,
    ImageMetrics,
    MetricsReport,
    ObjectMetrics,
    PixelMetrics,
)
from core.nn.tensor import ShapeMismatchError

logger = get_logger("metrics")


# ============================================================================
# CONFUSION MATRIX
# ============================================================================

@dataclass
class ConfusionMatrix:
    """counts[i, j]: items of true class i predicted as class j."""
    counts: np.ndarray
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(self.n_classes)]
        if len(self.class_names) != self.n_classes:
            raise ValueError(f"{len(self.class_names)} class names for {self.n_classes} classes")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def truth_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeMismatchError("confusion matrix", self.counts.shape, other.counts.shape)
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["truth\\predicted"] + self.class_names)
            for name, row in zip(self.class_names, self.counts):
                writer.writerow([name] + [int(v) for v in row])
        return path


def confusion_from_labels(
    truth: np.ndarray,
    predicted: np.ndarray,
    n_classes: Optional[int] = None,
    class_names: Optional[List[str]] = None,
) -> ConfusionMatrix:
    """Exact joint counts of two label maps of equal shape."""
    truth = np.asarray(truth).astype(np.int64)
    predicted = np.asarray(predicted).astype(np.int64)
    if truth.shape != predicted.shape:
        raise ShapeMismatchError("predicted label map", truth.shape, predicted.shape)
    if n_classes is None:
        n_classes = len(class_names) if class_names else int(max(truth.max(initial=0), predicted.max(initial=0))) + 1
    for what, labels in (("truth", truth), ("predicted", predicted)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"{what} labels outside 0..{n_classes - 1}")
    flat = n_classes * truth.ravel() + predicted.ravel()
    counts = np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts, list(class_names) if class_names else [])


# ============================================================================
# PIXEL METRICS
# ============================================================================

def _require_counts(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise ValueError("confusion matrix has no counts")


def _per_class(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(present mask, t_i, per-class accuracy, per-class IU) with NaN for absent classes."""
    t = cm.truth_totals.astype(np.float64)
    n_ii = cm.diagonal.astype(np.float64)
    union = t + cm.predicted_totals - n_ii
    present = t > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(present, n_ii / t, np.nan)
        iu = np.where(present, n_ii / union, np.nan)
    return present, t, acc, iu


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    _require_counts(cm)
    return float(cm.diagonal.sum() / cm.total)


def mean_accuracy(cm: ConfusionMatrix) -> float:
    _require_counts(cm)
    present, _, acc, _ = _per_class(cm)
    return float(acc[present].mean())


def mean_iu(cm: ConfusionMatrix) -> float:
    _require_counts(cm)
    present, _, _, iu = _per_class(cm)
    return float(iu[present].mean())


def fw_iu(cm: ConfusionMatrix) -> float:
    _require_counts(cm)
    present, t, _, iu = _per_class(cm)
    return float((t[present] * iu[present]).sum() / t.sum())


def pixel_metrics(cm: ConfusionMatrix) -> PixelMetrics:
    """All four pixel metrics plus per-class accuracy and IU."""
    present, t, acc, iu = _per_class(cm)
    per_class = [
        ClassPixelMetrics(
            name=name,
            support=int(t[i]),
            accuracy=float(acc[i]) if present[i] else None,
            iu=float(iu[i]) if present[i] else None,
        )
        for i, name in enumerate(cm.class_names)
    ]
    return PixelMetrics(
        pixel_acc=pixel_accuracy(cm),
        mean_acc=mean_accuracy(cm),
        mean_iu=mean_iu(cm),
        fw_iu=fw_iu(cm),
        per_class=per_class,
    )


# ============================================================================
# OBJECT / IMAGE METRICS
# ============================================================================

def _ratio(num: float, den: float) -> Optional[float]:
    return float(num / den) if den > 0 else None


def object_report_from_confusion(cm: ConfusionMatrix, not_segmented: int = 0) -> ObjectMetrics:
    """
    Per-class recall n_ii / t_i and precision n_ii / sum_i n_ij, plus two accuracies:
    not-segmented objects excluded, and counted as errors.
    """
    if not_segmented < 0:
        raise ValueError(f"not_segmented must be >= 0, got {not_segmented}")
    t = cm.truth_totals
    p = cm.predicted_totals
    n_ii = cm.diagonal
    per_class = [
        ClassObjectMetrics(
            name=name,
            support=int(t[i]),
            predicted=int(p[i]),
            recall=_ratio(n_ii[i], t[i]),
            precision=_ratio(n_ii[i], p[i]),
        )
        for i, name in enumerate(cm.class_names)
    ]
    correct = int(n_ii.sum())
    counted = cm.total
    return ObjectMetrics(
        per_class=per_class,
        correct=correct,
        counted=counted,
        not_segmented=int(not_segmented),
        accuracy_excluding_not_segmented=_ratio(correct, counted),
        accuracy_including_not_segmented=_ratio(correct, counted + not_segmented),
    )


def object_confusion(
    pairs: Sequence[Tuple[int, int]],
    n_cl: int,
    class_names: Optional[List[str]] = None,
) -> Tuple[ConfusionMatrix, int]:
    """
    Constituent-only confusion matrix (index c - 1 for class c) from
    (true class, voted class) pairs, plus the number of NOT_SEGMENTED votes.
    """
    counts = np.zeros((n_cl, n_cl), dtype=np.int64)
    not_segmented = 0
    offset = MATRIX_CLASS + 1
    for truth, voted in pairs:
        if not offset <= truth < offset + n_cl:
            raise ValueError(f"object truth class {truth} outside 1..{n_cl}")
        if voted == NOT_SEGMENTED:
            not_segmented += 1
            continue
        if not offset <= voted < offset + n_cl:
            raise ValueError(f"voted class {voted} outside 1..{n_cl}")
        counts[truth - offset, voted - offset] += 1
    names = class_names[offset:offset + n_cl] if class_names else []
    return ConfusionMatrix(counts, list(names)), not_segmented


def object_report(
    pairs: Sequence[Tuple[int, int]],
    not_segmented: int = 0,
    n_cl: int = 4,
    class_names: Optional[List[str]] = None,
) -> MetricsReport:
    """
    Object-level report from (true class, voted class) pairs.

    NOT_SEGMENTED votes found among the pairs are added to not_segmented.
    """
    cm, found = object_confusion(pairs, n_cl, class_names)
    objects = object_report_from_confusion(cm, not_segmented + found)
    return MetricsReport(class_names=cm.class_names, objects=objects)


def image_metrics(pairs: Sequence[Tuple[Optional[int], ImageClassification]]) -> ImageMetrics:
    """Whole-image accuracy; unclassifiable images count as wrong."""
    correct = sum(1 for truth, result in pairs
                  if result.status == "classified" and truth is not None and result.voted_class == truth)
    unclassifiable = sum(1 for _, result in pairs if result.status == "unclassifiable")
    return ImageMetrics(
        correct=correct,
        total=len(pairs),
        unclassifiable=unclassifiable,
        accuracy=_ratio(correct, len(pairs)),
    )


# ============================================================================
# RENDERING
# ============================================================================

def _pct(value: Optional[float]) -> str:
    return "   n/a" if value is None else f"{100.0 * value:6.2f}"


def format_report(report: MetricsReport) -> str:
    """Human-readable table of every section present in the report."""
    lines: List[str] = []
    if report.pixel is not None:
        px = report.pixel
        lines += [
            "PIXEL METRICS",
            f"  pixel accuracy  {_pct(px.pixel_acc)} %",
            f"  mean accuracy   {_pct(px.mean_acc)} %",
            f"  mean IU         {_pct(px.mean_iu)} %",
            f"  fw IU           {_pct(px.fw_iu)} %",
            "",
            f"  {'class':<22}{'support':>10}{'acc %':>9}{'IU %':>9}",
        ]
        for c in px.per_class:
            lines.append(f"  {c.name:<22}{c.support:>10}{_pct(c.accuracy):>9}{_pct(c.iu):>9}")
        lines.append("")
    if report.objects is not None:
        ob = report.objects
        lines += [
            "OBJECT METRICS",
            f"  {'class':<22}{'support':>10}{'voted':>8}{'recall %':>10}{'precision %':>13}",
        ]
        for c in ob.per_class:
            lines.append(
                f"  {c.name:<22}{c.support:>10}{c.predicted:>8}{_pct(c.recall):>10}{_pct(c.precision):>13}"
            )
        lines += [
            f"  correct {ob.correct} of {ob.counted} voted objects, {ob.not_segmented} not segmented",
            f"  accuracy (not-segmented excluded)  {_pct(ob.accuracy_excluding_not_segmented)} %",
            f"  accuracy (not-segmented as errors) {_pct(ob.accuracy_including_not_segmented)} %",
            "",
        ]
    if report.images is not None:
        im = report.images
        lines += [
            "IMAGE METRICS",
            f"  correct {im.correct} of {im.total} images ({im.unclassifiable} unclassifiable)"
            f"  accuracy {_pct(im.accuracy)} %",
            "",
        ]
    return "\n".join(lines)


def write_report(report: MetricsReport, out_dir: Path, stem: str = "report") -> Tuple[Path, Path]:
    """Write <stem>.json (sorted keys) and <stem>.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    text_path = out_dir / f"{stem}.txt"
    json_path.write_text(
        json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    text_path.write_text(format_report(report), encoding="utf-8")
    logger.info("Report written", extra={"path": str(json_path)})
    return json_path, text_path
