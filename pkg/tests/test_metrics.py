#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Test suite for pixel metrics, object reports and report rendering.
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

from core.metrics import (
    ConfusionMatrix,
    confusion_from_labels,
    fw_iu,
    image_metrics,
    mean_accuracy,
    mean_iu,
    object_report,
    pixel_accuracy,
    pixel_metrics,
    write_report,
)
from core.models.micrograph import NOT_SEGMENTED, class_names
from core.models.results import ImageClassification, MetricsReport
from core.nn.tensor import ShapeMismatchError

# Steel test-set object confusion: rows are true martensite, tempered
# martensite, bainite, pearlite; columns the voted class
STEEL_OBJECT_COUNTS = [
    [1190, 24, 39, 0],
    [0, 268, 6, 0],
    [11, 0, 325, 9],
    [0, 0, 16, 317],
]
STEEL_NOT_SEGMENTED = 48


def all_metrics(cm: ConfusionMatrix):
    return pixel_accuracy(cm), mean_accuracy(cm), mean_iu(cm), fw_iu(cm)


def test_two_class_example():
    """Test hand-evaluated metrics on [[50, 50], [0, 100]]."""
    print("\n=== Test 1: Two-Class Example ===")

    cm = ConfusionMatrix(np.array([[50, 50], [0, 100]]))
    pa, ma, miu, fwiu = all_metrics(cm)
    assert pa == pytest.approx(0.75)
    assert ma == pytest.approx(0.75)
    assert miu == pytest.approx(7 / 12)
    assert fwiu == pytest.approx(7 / 12)
    print(f"✓ pixel acc {pa}, mean acc {ma}, mean IU {miu:.6f}, fw IU {fwiu:.6f}")

    truth = np.random.default_rng(0).integers(0, 3, size=(20, 20))
    perfect = confusion_from_labels(truth, truth)
    npt.assert_array_equal(perfect.counts, np.diag(np.bincount(truth.ravel(), minlength=3)))
    assert all(v == pytest.approx(1.0) for v in all_metrics(perfect))
    print("✓ Perfect prediction gives 1.0 everywhere")

    column = confusion_from_labels(truth, np.zeros_like(truth), n_classes=3)
    assert np.count_nonzero(column.counts[:, 1:]) == 0
    print("✓ Constant prediction fills a single column")


def test_confusion_oracle_and_invariants():
    """Test joint counts against a per-pixel tally and the metric inequalities."""
    print("\n=== Test 2: Confusion Oracle ===")

    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 6))
        truth = rng.integers(0, n, size=(16, 16))
        pred = np.where(rng.random((16, 16)) < 0.6, truth, rng.integers(0, n, size=(16, 16)))
        cm = confusion_from_labels(truth, pred, n_classes=n)

        tally = np.zeros((n, n), dtype=np.int64)
        for t, p in zip(truth.ravel(), pred.ravel()):
            tally[t, p] += 1
        npt.assert_array_equal(cm.counts, tally)
        assert cm.total == truth.size

        pa, ma, miu, fwiu = all_metrics(cm)
        assert pa >= fwiu - 1e-12 and ma >= miu - 1e-12
        assert all(0.0 <= v <= 1.0 for v in (pa, ma, miu, fwiu))

        perm = rng.permutation(n)
        relabeled = confusion_from_labels(perm[truth], perm[pred], n_classes=n)
        npt.assert_allclose(all_metrics(relabeled), (pa, ma, miu, fwiu), rtol=1e-12)
    print("✓ 200 random pairs match the tally oracle; permutation invariance holds")

    with pytest.raises(ShapeMismatchError):
        confusion_from_labels(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        confusion_from_labels(np.array([[0, 5]]), np.array([[0, 1]]), n_classes=3)


def test_absent_classes_and_errors():
    """Test that classes missing from the truth drop out of the means."""
    print("\n=== Test 3: Absent Classes ===")

    cm = ConfusionMatrix(np.array([[8, 2, 0], [0, 0, 0], [0, 5, 5]]))
    assert mean_accuracy(cm) == pytest.approx((0.8 + 0.5) / 2)
    assert mean_iu(cm) == pytest.approx((8 / 10 + 5 / 10) / 2)
    metrics = pixel_metrics(cm)
    assert metrics.per_class[1].accuracy is None and metrics.per_class[1].iu is None
    assert metrics.per_class[1].support == 0

    empty = ConfusionMatrix(np.zeros((2, 2), dtype=np.int64))
    for fn in (pixel_accuracy, mean_accuracy, mean_iu, fw_iu):
        with pytest.raises(ValueError):
            fn(empty)
    for bad in (np.zeros((2, 3)), np.array([[1, -1], [0, 0]])):
        with pytest.raises(ValueError):
            ConfusionMatrix(bad)
    with pytest.raises(ValueError):
        ConfusionMatrix(np.eye(2), ["only_one"])

    total = ConfusionMatrix(np.eye(2, dtype=np.int64)) + ConfusionMatrix(np.ones((2, 2), dtype=np.int64))
    npt.assert_array_equal(total.counts, [[2, 1], [1, 2]])
    print("✓ Absent classes excluded; empty matrices rejected")


def test_steel_object_report():
    """Test recall, precision and both accuracies on the steel object counts."""
    print("\n=== Test 4: Object Report ===")

    pairs = [
        (truth + 1, voted + 1)
        for truth, row in enumerate(STEEL_OBJECT_COUNTS)
        for voted, count in enumerate(row)
        for _ in range(count)
    ]
    report = object_report(pairs, not_segmented=STEEL_NOT_SEGMENTED, n_cl=4, class_names=class_names(4))
    objects = report.objects
    assert report.class_names == ["martensite", "tempered_martensite", "bainite", "pearlite"]

    martensite, tempered = objects.per_class[0], objects.per_class[1]
    assert round(100 * martensite.recall, 2) == 94.97
    assert round(100 * martensite.precision, 2) == 99.08
    assert round(100 * tempered.recall, 2) == 97.81
    assert objects.correct == 2100 and objects.counted == 2205
    assert objects.accuracy_excluding_not_segmented == pytest.approx(2100 / 2205)
    assert 100 * objects.accuracy_excluding_not_segmented == pytest.approx(95.238, abs=1e-3)
    assert objects.accuracy_including_not_segmented == pytest.approx(2100 / 2253)
    print(f"✓ martensite recall {100 * martensite.recall:.2f} %, "
          f"accuracy {100 * objects.accuracy_excluding_not_segmented:.2f} %")

    # NOT_SEGMENTED votes inside the pairs add to the count
    mixed = object_report([(1, 1), (2, NOT_SEGMENTED), (2, 2)], not_segmented=1, n_cl=2)
    assert mixed.objects.not_segmented == 2 and mixed.objects.counted == 2
    assert mixed.objects.accuracy_excluding_not_segmented == 1.0
    assert mixed.objects.accuracy_including_not_segmented == 0.5

    clean = object_report([(1, 1), (2, 2), (3, 3)], n_cl=3)
    assert clean.objects.accuracy_excluding_not_segmented == clean.objects.accuracy_including_not_segmented == 1.0

    with pytest.raises(ValueError):
        object_report([(0, 1)], n_cl=4)
    with pytest.raises(ValueError):
        object_report([(1, 5)], n_cl=4)
    print("✓ Not-segmented bookkeeping passed")


def test_object_report_recount():
    """Test random reports against a brute-force recount."""
    print("\n=== Test 5: Object Recount Oracle ===")

    rng = np.random.default_rng(2)
    for _ in range(50):
        n_cl = int(rng.integers(2, 5))
        pairs = [(int(rng.integers(1, n_cl + 1)),
                  int(rng.choice([NOT_SEGMENTED] + list(range(1, n_cl + 1)))))
                 for _ in range(int(rng.integers(1, 40)))]
        objects = object_report(pairs, n_cl=n_cl).objects
        voted = [(t, v) for t, v in pairs if v != NOT_SEGMENTED]
        correct = sum(1 for t, v in voted if t == v)
        assert objects.correct == correct and objects.counted == len(voted)
        assert objects.not_segmented == len(pairs) - len(voted)
        for c, metrics in enumerate(objects.per_class, start=1):
            support = sum(1 for t, _ in voted if t == c)
            predicted = sum(1 for _, v in voted if v == c)
            hits = sum(1 for t, v in voted if t == v == c)
            assert metrics.support == support and metrics.predicted == predicted
            assert metrics.recall == (hits / support if support else None)
            assert metrics.precision == (hits / predicted if predicted else None)
    print("✓ Recount oracle passed")


def test_image_metrics_and_rendering():
    """Test image accuracy and the JSON/text/CSV report files."""
    print("\n=== Test 6: Image Metrics and Rendering ===")

    def decided(cls):
        return ImageClassification(status="classified", voted_class=cls, object_votes=[0] * 5)

    images = image_metrics([(1, decided(1)), (2, decided(3)), (4, ImageClassification.unclassifiable(4)),
                            (3, decided(3))])
    assert images.correct == 2 and images.total == 4 and images.unclassifiable == 1
    assert images.accuracy == 0.5
    assert image_metrics([]).accuracy is None

    cm = ConfusionMatrix(np.array([[50, 50], [0, 100]]), ["matrix", "martensite"])
    report = MetricsReport(
        class_names=cm.class_names,
        pixel=pixel_metrics(cm),
        objects=object_report([(1, 1)], n_cl=1).objects,
        images=images,
    )
    with tempfile.TemporaryDirectory() as tmp:
        json_path, text_path = write_report(report, Path(tmp))
        data = json.loads(json_path.read_text(encoding="utf-8"))
        assert data["pixel"]["pixel_acc"] == 0.75
        assert MetricsReport.model_validate(data) == report
        text = text_path.read_text(encoding="utf-8")
        for heading in ("PIXEL METRICS", "OBJECT METRICS", "IMAGE METRICS"):
            assert heading in text
        assert " 75.00 %" in text

        lines = cm.write_csv(Path(tmp) / "cm.csv").read_text(encoding="utf-8").splitlines()
    assert lines == ["truth\\predicted,matrix,martensite", "matrix,50,50", "martensite,0,100"]
    print("✓ Report files passed")


def main():
    """Run all tests."""
    print("=" * 70)
    print("METRICS TESTS")
    print("=" * 70)

    tests = [
        test_two_class_example,
        test_confusion_oracle_and_invariants,
        test_absent_classes_and_errors,
        test_steel_object_report,
        test_object_report_recount,
        test_image_metrics_and_rendering,
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
