#!/usr/bin/env python3
"""
Tests for test-time augmentation transforms, the Monte-Carlo harness and
predictor plug-ins.
"""
import math
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.errors import MissingPredictionError, PredictorError, UncertaintyError
from services.models import (
    Interpolation,
    McStack,
    ModelScope,
    ModelScopeKind,
    RaterModel,
    TtaRanges,
    TtaTransform,
    Volume,
    VolumeKind,
)
from services.uncertainty.harness import (
    MAX_ENTROPY,
    entropy_map,
    mc_predict,
    summarize,
    union_mask,
    volume_uncertainty,
)
from services.uncertainty.predictors import (
    PrecomputedPredictor,
    SubprocessPredictor,
    plane_key,
    predictor_for_scope,
)
from services.uncertainty.transforms import apply_transform, sample_transform
from services.volume_io import load_volume, save_volume


def blob(size: int = 48, sigma: float = 6.0) -> np.ndarray:
    grid = np.arange(size) - (size - 1) / 2.0
    return np.exp(-(grid[:, None] ** 2 + grid[None, :] ** 2) / (2 * sigma ** 2))


def disk_plane(size: int = 32, radius: float = 8.0) -> np.ndarray:
    grid = np.arange(size) - (size - 1) / 2.0
    return (grid[:, None] ** 2 + grid[None, :] ** 2 <= radius ** 2).astype(np.float64)


def stack_of(fractions_positive: int, n: int = 10) -> McStack:
    return McStack(samples=[np.full((1, 1), 1.0 if i < fractions_positive else 0.0) for i in range(n)])


class ConstantPredictor:
    name = "constant"

    def __init__(self, value: float):
        self.value = value

    def __call__(self, plane):
        return np.full(np.shape(plane), self.value)


class FailingPredictor:
    name = "failing"

    def __call__(self, plane):
        raise RuntimeError("model crashed")


class TestTransforms(unittest.TestCase):
    """Similarity warps about the plane center."""

    def test_sampling_is_deterministic(self):
        ranges = TtaRanges.symmetric(10.0, 3.0, 0.02)
        first = sample_transform(ranges, np.random.SeedSequence(5))
        second = sample_transform(ranges, np.random.SeedSequence(5))
        self.assertEqual(first, second)
        self.assertTrue(-10.0 <= first.rotation_deg <= 10.0)
        self.assertTrue(0.98 <= first.scale <= 1.02)

    def test_identity_ranges(self):
        t = sample_transform(TtaRanges.identity(), 3)
        self.assertTrue(t.is_identity)
        plane = blob(8)
        np.testing.assert_array_equal(apply_transform(plane, t), plane)

    def test_quarter_turn(self):
        plane = np.random.default_rng(0).random((9, 9))
        rotated = apply_transform(plane, TtaTransform(rotation_deg=90.0))
        np.testing.assert_allclose(rotated, np.rot90(plane), atol=1e-9)

    def test_integer_translation_round_trip(self):
        plane = disk_plane(20, 4.0)
        t = TtaTransform(translation_px=(2.0, -1.0))
        moved = apply_transform(plane, t)
        # output(i, j) = input(i - 2, j + 1)
        np.testing.assert_allclose(moved[2:, :-1], plane[:-2, 1:], atol=1e-9)
        np.testing.assert_allclose(apply_transform(moved, t.inverse()), plane, atol=1e-9)

    def test_bilinear_round_trip_interior(self):
        plane = blob()
        ranges = TtaRanges.symmetric(10.0, 3.0, 0.02)
        margin = int(math.ceil(ranges.max_displacement(plane.shape))) + 1
        for seed in range(5):
            t = sample_transform(ranges, seed)
            restored = apply_transform(apply_transform(plane, t), t.inverse())
            interior = (slice(margin, -margin), slice(margin, -margin))
            self.assertLess(np.abs(restored[interior] - plane[interior]).mean(), 0.02)

    def test_nearest_keeps_masks_binary(self):
        t = TtaTransform(rotation_deg=7.0, translation_px=(0.5, 1.5), scale=1.01)
        warped = apply_transform(disk_plane(), t, Interpolation.NEAREST)
        self.assertTrue(set(np.unique(warped)) <= {0.0, 1.0})

    def test_inverse_composes_to_identity(self):
        t = TtaTransform(rotation_deg=12.0, translation_px=(1.0, -2.0), scale=1.05)
        inverse = t.inverse()
        np.testing.assert_allclose(inverse.linear() @ t.linear(), np.eye(2), atol=1e-12)

    def test_rejects_non_planes(self):
        with self.assertRaises(UncertaintyError):
            apply_transform(np.zeros((2, 2, 2)), TtaTransform(rotation_deg=1.0))


class TestEntropy(unittest.TestCase):
    """Binary entropy of the positive fraction, in nats."""

    def test_entropy_table(self):
        self.assertEqual(entropy_map(stack_of(0))[0, 0], 0.0)
        self.assertEqual(entropy_map(stack_of(10))[0, 0], 0.0)
        self.assertAlmostEqual(entropy_map(stack_of(3))[0, 0], 0.6109, places=4)
        self.assertAlmostEqual(entropy_map(stack_of(5))[0, 0], math.log(2.0), places=12)
        self.assertAlmostEqual(entropy_map(stack_of(7))[0, 0], entropy_map(stack_of(3))[0, 0], places=12)

    def test_binarize_threshold(self):
        stack = McStack(samples=[np.full((1, 1), 0.4), np.full((1, 1), 0.6)])
        self.assertAlmostEqual(entropy_map(stack)[0, 0], MAX_ENTROPY)
        self.assertEqual(entropy_map(stack, binarize_threshold=0.3)[0, 0], 0.0)
        self.assertTrue(union_mask(stack)[0, 0])
        self.assertFalse(union_mask(stack, binarize_threshold=0.7)[0, 0])

    def test_summarize(self):
        entropy = np.zeros((10, 10))
        entropy[0, :] = math.log(2.0)
        union = np.zeros((10, 10), dtype=bool)
        union[0, :] = True
        report = summarize([entropy], [union], n_samples=10, seed=0)
        self.assertAlmostEqual(report.mean_entropy_union, math.log(2.0))
        self.assertAlmostEqual(report.mean_entropy_all, 0.1 * math.log(2.0))
        self.assertEqual(report.entropy_unit, "nats")

    def test_summarize_skips_empty_union(self):
        maps = [np.full((2, 2), 0.5), np.zeros((2, 2))]
        unions = [np.ones((2, 2), dtype=bool), np.zeros((2, 2), dtype=bool)]
        report = summarize(maps, unions)
        self.assertEqual(report.per_image_union, [0.5, None])
        self.assertEqual(report.mean_entropy_union, 0.5)
        self.assertAlmostEqual(report.mean_entropy_all, 0.25)
        self.assertEqual(report.skipped_images, 1)

    def test_summarize_all_empty(self):
        report = summarize([np.zeros((2, 2))], [np.zeros((2, 2), dtype=bool)])
        self.assertIsNone(report.mean_entropy_union)
        self.assertIn("union_empty", report.flags)

    def test_summarize_shape_mismatch(self):
        with self.assertRaises(UncertaintyError):
            summarize([np.zeros((2, 2))], [np.zeros((3, 3), dtype=bool)])


class TestHarness(unittest.TestCase):
    """Monte-Carlo prediction over augmented planes."""

    def setUp(self):
        self.plane = disk_plane()
        self.oracle = predictor_for_scope("synthetic:oracle")
        self.ranges = TtaRanges.symmetric(10.0, 3.0, 0.02)

    def test_thread_count_does_not_change_samples(self):
        single = mc_predict(self.plane, self.oracle, 6, self.ranges, seed=7, threads=1, stream=(0, 1))
        pooled = mc_predict(self.plane, self.oracle, 6, self.ranges, seed=7, threads=4, stream=(0, 1))
        for a, b in zip(single.samples, pooled.samples):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(single.transforms, pooled.transforms)

    def test_streams_differ(self):
        a = mc_predict(self.plane, self.oracle, 3, self.ranges, seed=7, stream=(0, 0))
        b = mc_predict(self.plane, self.oracle, 3, self.ranges, seed=7, stream=(0, 1))
        self.assertNotEqual(a.transforms, b.transforms)

    def test_identity_ranges_give_zero_entropy(self):
        stack = mc_predict(self.plane, self.oracle, 5, TtaRanges.identity(), seed=1)
        self.assertEqual(float(entropy_map(stack).max()), 0.0)

    def test_constant_half_predictor(self):
        stack = mc_predict(self.plane, ConstantPredictor(0.5), 4, TtaRanges.identity(), seed=1)
        self.assertTrue(union_mask(stack).all())
        self.assertEqual(float(entropy_map(stack).max()), 0.0)

    def test_augmentation_adds_boundary_entropy(self):
        stack = mc_predict(self.plane, self.oracle, 10, self.ranges, seed=3)
        entropy = entropy_map(stack)
        self.assertGreater(entropy.max(), 0.0)
        self.assertLessEqual(entropy.max(), MAX_ENTROPY)
        # Deep inside the disk every draw agrees.
        self.assertEqual(entropy[16, 16], 0.0)

    def test_too_few_samples(self):
        with self.assertRaises(UncertaintyError):
            mc_predict(self.plane, self.oracle, 1, self.ranges, seed=0)

    def test_predictor_failure_names_draw(self):
        with self.assertRaises(PredictorError) as ctx:
            mc_predict(self.plane, FailingPredictor(), 3, self.ranges, seed=0)
        self.assertIsNotNone(ctx.exception.sample_index)

    def test_bad_prediction_shape(self):
        with self.assertRaises(PredictorError):
            mc_predict(self.plane, lambda plane: np.zeros((2, 2)), 2, self.ranges, seed=0)

    def test_volume_uncertainty(self):
        intensity = Volume.from_array(np.stack([self.plane, self.plane], axis=2), kind=VolumeKind.IMAGE)
        entropy, union = volume_uncertainty(intensity, self.oracle, 4, self.ranges, seed=2)
        self.assertEqual(entropy.kind, VolumeKind.IMAGE)
        self.assertEqual(union.kind, VolumeKind.MASK)
        self.assertEqual(entropy.geometry, intensity.geometry)
        # Planes draw from different streams.
        self.assertFalse(np.array_equal(entropy.values[:, :, 0], entropy.values[:, :, 1]))


class TestPredictors(unittest.TestCase):
    """Predictor specs and plug-ins."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_synthetic_specs(self):
        self.assertEqual(predictor_for_scope("synthetic:oracle").name, "synthetic:oracle")
        noisy = predictor_for_scope("synthetic:noisy_boundary:sigma=0.3")
        self.assertEqual(noisy.sigma, 0.3)
        biased = predictor_for_scope("synthetic:biased:b=2")
        self.assertEqual(biased.steps, 2)

    def test_biased_style_from_scope(self):
        models = {
            "a1": RaterModel(rater_id="a1", center_id="A", center_style=2.0, rater_offset=0.6),
            "a2": RaterModel(rater_id="a2", center_id="A", center_style=2.0, rater_offset=-0.2),
        }
        scope = ModelScope(label="center:A", kind=ModelScopeKind.CENTER_CONSENSUS, center_id="A", rater_ids=["a1", "a2"])
        predictor = predictor_for_scope("synthetic:biased", scope, models)
        # Mean style 2.2 rounds to 2 steps.
        self.assertEqual(predictor.steps, 2)
        with self.assertRaises(UncertaintyError):
            predictor_for_scope("synthetic:biased", scope, {})
        with self.assertRaises(UncertaintyError):
            predictor_for_scope("synthetic:biased")

    def test_invalid_specs(self):
        for spec in ("oracle", "magic:thing", "synthetic:oracle:sigma"):
            with self.assertRaises(UncertaintyError):
                predictor_for_scope(spec)

    def test_command_spec_substitutes_scope(self):
        scope = ModelScope(label="a1", kind=ModelScopeKind.RATER, center_id="A", rater_ids=["a1"])
        predictor = predictor_for_scope("cmd:run-model --weights w/{scope}.pt", scope)
        self.assertIsInstance(predictor, SubprocessPredictor)
        self.assertEqual(predictor.argv, ["run-model", "--weights", "w/a1.pt"])

    def test_missing_command(self):
        predictor = SubprocessPredictor([str(self.tmp / "no-such-model")])
        with self.assertRaises(PredictorError):
            predictor(disk_plane(8, 2.0))

    def test_precomputed_exchange(self):
        plane = disk_plane(8, 2.0)
        predictor = PrecomputedPredictor(self.tmp)
        with self.assertRaises(PredictorError):
            predictor(plane)
        key = plane_key(plane)
        self.assertTrue((self.tmp / f"{key}_input.rvol").is_file())

        save_volume(Volume.from_array(plane * 0.8, kind=VolumeKind.PROBABILITY), self.tmp / f"{key}_pred.rvol")
        np.testing.assert_allclose(predictor(plane), plane * 0.8, rtol=1e-6)

    def test_precomputed_exports_every_draw(self):
        predictor = PrecomputedPredictor(self.tmp)
        with self.assertRaises(MissingPredictionError) as ctx:
            mc_predict(disk_plane(), predictor, 5, TtaRanges.symmetric(10.0, 3.0, 0.02), seed=4)
        self.assertIsInstance(ctx.exception, PredictorError)
        self.assertEqual(len(ctx.exception.keys), 5)
        self.assertEqual(len(list(self.tmp.glob("*_input.rvol"))), 5)

    def test_precomputed_exchange_over_volume(self):
        intensity = Volume.from_array(
            np.stack([disk_plane(), disk_plane(radius=6.0)], axis=2), kind=VolumeKind.IMAGE
        )
        predictor = PrecomputedPredictor(self.tmp)
        ranges = TtaRanges.symmetric(10.0, 3.0, 0.02)
        with self.assertRaises(MissingPredictionError) as ctx:
            volume_uncertainty(intensity, predictor, 3, ranges, seed=1)
        self.assertEqual(len(ctx.exception.keys), 6)

        # Stand-in external model: threshold every exported input.
        for path in self.tmp.glob("*_input.rvol"):
            key = path.name[: -len("_input.rvol")]
            values = (load_volume(path).values >= 0.5).astype(np.float32)
            save_volume(Volume.from_array(values, kind=VolumeKind.PROBABILITY), self.tmp / f"{key}_pred.rvol")
        entropy, union = volume_uncertainty(intensity, predictor, 3, ranges, seed=1)
        self.assertEqual(entropy.geometry, intensity.geometry)
        self.assertTrue(union.values[16, 16, 0])

    def test_precomputed_scope_directory(self):
        scope = ModelScope(label="center:A", kind=ModelScopeKind.CENTER_CONSENSUS, center_id="A", rater_ids=["a1"])
        predictor = predictor_for_scope(f"precomputed:{self.tmp}", scope)
        self.assertEqual(predictor.directory, self.tmp / "center_A")

    def test_plane_key(self):
        plane = disk_plane(8, 2.0)
        self.assertEqual(plane_key(plane), plane_key(plane.copy()))
        self.assertNotEqual(plane_key(plane), plane_key(plane.T[:, :7]))


if __name__ == "__main__":
    unittest.main()
