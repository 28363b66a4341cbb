#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Test suite for the synthetic micrograph generator.
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

from core.imaging.objects import connected_components, threshold_mask
from core.models.micrograph import DatasetManifest
from core.models.training import SynthConfig
from core.synth import (
    class_texture,
    classify_texture,
    dataset_plan,
    generate_dataset,
    generate_sample,
    synthesize,
    texture_signature,
)

SMALL = SynthConfig(height=64, width=64, objects_per_image=3, object_size=(14, 20), n_train=4, n_test=4)


def tree_bytes(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_sample_determinism_and_consistency():
    """Test per-seed determinism and label/mask/threshold consistency."""
    print("\n=== Test 1: Sample Generation ===")

    config = SynthConfig(height=96, width=96, objects_per_image=4, object_size=(14, 24))
    for cls in range(1, 5):
        a = synthesize(config, cls, [3, cls], name="s")
        b = generate_sample(config, cls, [3, cls], name="s")
        npt.assert_array_equal(a.sample.image, b.image)
        npt.assert_array_equal(a.sample.label_map, b.label_map)

        sample = a.sample
        assert sample.sample_class == cls
        assert set(np.unique(sample.label_map).tolist()) <= {0, cls}
        npt.assert_array_equal(sample.label_map > 0, sample.mask)
        npt.assert_array_equal(threshold_mask(sample.image, config.threshold), sample.mask)
        assert sample.image[sample.mask].max() <= config.threshold - 20
        assert len(connected_components(sample.mask)) == a.placed
        print(f"✓ class {cls}: {a.placed} objects, mask recovered by thresholding")

    other = generate_sample(config, 1, [4, 1], name="s")
    assert not np.array_equal(other.image, generate_sample(config, 1, [3, 1], name="s").image)

    with pytest.raises(ValueError):
        generate_sample(config, 0, 1)
    with pytest.raises(ValueError):
        generate_sample(config, 5, 1)


def test_placement_budget():
    """Test that an overfull request places fewer objects instead of failing."""
    print("\n=== Test 2: Placement Budget ===")

    crowded = SynthConfig(height=48, width=48, objects_per_image=50, object_size=(14, 20),
                          max_placement_retries=40)
    result = synthesize(crowded, 2, 0)
    assert 1 <= result.placed < 50
    assert len(connected_components(result.sample.mask)) == result.placed
    print(f"✓ Placed {result.placed} of 50 without overlap")

    empty = synthesize(SynthConfig(height=32, width=32, objects_per_image=0, object_size=(14, 20)), 3, 0)
    assert empty.placed == 0 and not empty.sample.mask.any()


def test_texture_families():
    """Test that the directional signature separates the four textures."""
    print("\n=== Test 3: Texture Families ===")

    rng = np.random.default_rng(0)
    for cls in range(1, 5):
        texture = class_texture(cls, (64, 64), rng) + 4.0 * rng.normal(size=(64, 64))
        assert classify_texture(texture_signature(texture)) == cls

    config = SynthConfig(height=96, width=96, objects_per_image=4, object_size=(18, 30))
    for cls in range(1, 5):
        sample = generate_sample(config, cls, [11, cls])
        assert classify_texture(texture_signature(sample.image, sample.mask)) == cls
    print("✓ Textures are separable")

    with pytest.raises(ValueError):
        texture_signature(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        class_texture(7, (8, 8), rng)


def test_dataset_generation():
    """Test manifest contents and thread-count independence of the written bytes."""
    print("\n=== Test 4: Dataset Generation ===")

    plan = dataset_plan(SMALL)
    assert [p[2] for p in plan[:2]] == ["train_000", "train_001"]
    assert [p[3] for p in plan] == [1, 2, 3, 4, 1, 2, 3, 4]
    assert [p[1] for p in plan].count("test") == 4

    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        manifest = generate_dataset(SMALL, Path(a), threads=1)
        generate_dataset(SMALL, Path(b), threads=4)
        assert tree_bytes(Path(a)) == tree_bytes(Path(b)), "Output differs between thread counts"

        loaded = DatasetManifest.load(Path(a) / "manifest.json")
        assert loaded.entries == manifest.entries
        assert len(loaded.split("train")) == 4 and len(loaded.split("test")) == 4
        assert loaded.class_names[0] == "matrix" and loaded.n_classes == 4
        assert sum(loaded.class_object_totals.values()) == sum(e.object_count for e in loaded.entries)
        for entry in loaded.entries:
            for rel in (entry.image, entry.label_map, entry.mask):
                assert loaded.resolve(rel).exists()
        assert SynthConfig.model_validate_json((Path(a) / "synth_config.json").read_text()) == SMALL
    print("✓ Dataset bytes identical for 1 and 4 threads")


def test_config_validation():
    """Test object size, threshold and fit constraints."""
    print("\n=== Test 5: Synth Config ===")

    for bad in ({"object_size": (10, 20)}, {"object_size": (30, 20)}, {"threshold": 210},
                {"height": 32, "object_size": (14, 30)}, {"unknown": 1}):
        with pytest.raises(ValidationError):
            SynthConfig(**bad)
    print("✓ Invalid synth configs rejected")


def main():
    """Run all tests."""
    print("=" * 70)
    print("SYNTHETIC DATA TESTS")
    print("=" * 70)

    tests = [
        test_sample_determinism_and_consistency,
        test_placement_budget,
        test_texture_families,
        test_dataset_generation,
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
