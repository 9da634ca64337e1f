#!/usr/bin/env python3
"""
Tests for rater style metrics: bias, consistency, relative variants and ASSD.
"""
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.errors import GeometryMismatchError, MetricError
from services.models import ConsensusScope, DatasetManifest, FusionMethod, Volume
from services.style_metrics import (
    assd,
    bias,
    boundary,
    compare_style_tables,
    consistency,
    read_style_csv,
    relative_bias,
    relative_consistency,
    style_table,
    write_style_csv,
)
from services.volume_io import save_volume
from utils.atomic import meta_path


def count_mask(n_positive: int, size: int = 32) -> np.ndarray:
    """A flat mask with exactly ``n_positive`` positive voxels."""
    values = np.zeros((size, 1, 1), dtype=np.uint8)
    values[:n_positive] = 1
    return values


def masks_with_counts(counts):
    return [count_mask(n) for n in counts]


def brute_force_assd(a: np.ndarray, b: np.ndarray, spacing) -> float:
    pa = np.argwhere(boundary(a)) * np.asarray(spacing)
    pb = np.argwhere(boundary(b)) * np.asarray(spacing)
    ab = [min(np.linalg.norm(x - y) for y in pb) for x in pa]
    ba = [min(np.linalg.norm(x - y) for y in pa) for x in pb]
    return 0.5 * (np.mean(ab) + np.mean(ba))


class TestVolumeStyle(unittest.TestCase):
    """Bias and consistency from positive voxel counts."""

    def test_constant_over_segmenter(self):
        raters = masks_with_counts([15, 17])
        consensus = masks_with_counts([10, 10])
        self.assertEqual(bias(raters, consensus), 6.0)
        self.assertEqual(consistency(raters, consensus), 1.0)

    def test_cancelling_differences(self):
        raters = masks_with_counts([15, 5])
        consensus = masks_with_counts([10, 10])
        self.assertEqual(bias(raters, consensus), 0.0)
        self.assertEqual(consistency(raters, consensus), 5.0)

    def test_identical_masks(self):
        masks = masks_with_counts([3, 0, 9])
        self.assertEqual(bias(masks, masks), 0.0)
        self.assertEqual(consistency(masks, masks), 0.0)

    def test_relative_bias(self):
        raters = [count_mask(110, size=128)]
        consensus = [count_mask(100, size=128)]
        self.assertAlmostEqual(relative_bias(raters, consensus), 0.10)
        self.assertEqual(relative_consistency(raters, consensus), 0.0)

    def test_relative_consistency(self):
        raters = masks_with_counts([11, 26])
        consensus = masks_with_counts([10, 20])
        self.assertAlmostEqual(relative_bias(raters, consensus), 0.2)
        self.assertAlmostEqual(relative_consistency(raters, consensus), 0.1)

    def test_relative_skips_empty_consensus(self):
        raters = masks_with_counts([3, 12])
        consensus = masks_with_counts([0, 10])
        self.assertAlmostEqual(relative_bias(raters, consensus), 0.2)
        self.assertIsNone(relative_bias([count_mask(3)], [count_mask(0)]))

    def test_accepts_volumes(self):
        raters = [Volume.from_array(count_mask(4))]
        consensus = [Volume.from_array(count_mask(2))]
        self.assertEqual(bias(raters, consensus), 2.0)

    def test_length_mismatch(self):
        with self.assertRaises(MetricError):
            bias(masks_with_counts([1, 2]), masks_with_counts([1]))
        with self.assertRaises(MetricError):
            bias([], [])

    def test_shape_mismatch(self):
        with self.assertRaises(GeometryMismatchError):
            bias([count_mask(1, size=4)], [count_mask(1, size=5)])


class TestAssd(unittest.TestCase):
    """Average symmetric surface distance."""

    def test_shifted_planes(self):
        a = np.zeros((1, 1, 8), dtype=np.uint8)
        b = np.zeros((1, 1, 8), dtype=np.uint8)
        a[0, 0, 1] = 1
        b[0, 0, 4] = 1
        self.assertAlmostEqual(assd(Volume.from_array(a), Volume.from_array(b)), 3.0)

    def test_identical_masks(self):
        values = np.zeros((6, 6, 3), dtype=np.uint8)
        values[1:5, 1:5, :] = 1
        volume = Volume.from_array(values)
        self.assertEqual(assd(volume, volume), 0.0)

    def test_symmetric_and_matches_brute_force(self):
        rng = np.random.default_rng(9)
        spacing = (0.8, 1.0, 2.5)
        for _ in range(10):
            a = rng.random((6, 5, 3)) < 0.4
            b = rng.random((6, 5, 3)) < 0.4
            if not a.any() or not b.any():
                continue
            va, vb = Volume.from_array(a, spacing=spacing), Volume.from_array(b, spacing=spacing)
            forward, backward = assd(va, vb), assd(vb, va)
            self.assertAlmostEqual(forward, backward, places=12)
            self.assertAlmostEqual(forward, brute_force_assd(a, b, spacing), places=9)

    def test_distance_transform_path_agrees(self):
        from config.settings import settings

        rng = np.random.default_rng(10)
        a = Volume.from_array(rng.random((8, 8, 3)) < 0.3)
        b = Volume.from_array(rng.random((8, 8, 3)) < 0.3)
        exact = assd(a, b)
        limit = settings.assd_bruteforce_max_pairs
        settings.assd_bruteforce_max_pairs = 0
        try:
            self.assertAlmostEqual(assd(a, b), exact, places=9)
        finally:
            settings.assd_bruteforce_max_pairs = limit

    def test_empty_mask(self):
        empty = Volume.from_array(np.zeros((3, 3, 1)))
        full = Volume.from_array(np.ones((3, 3, 1)))
        self.assertIsNone(assd(empty, full))


class TestStyleTable(unittest.TestCase):
    """Style tables built from a manifest on disk."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        # Two subjects; consensus count is 10 on both.
        counts = {"a1": (12, 14), "a2": (10, 10), "b1": (8, 9)}
        centers = {"a1": "A", "a2": "A", "b1": "B"}
        subjects = []
        for index in range(2):
            entries = []
            for rater_id, pair in counts.items():
                path = f"s{index}/{rater_id}.rvol"
                save_volume(Volume.from_array(count_mask(pair[index])), self.tmp / path)
                entries.append({"rater_id": rater_id, "center_id": centers[rater_id], "mask_path": path})
            subjects.append({"subject_id": f"s{index}", "entries": entries})
        self.manifest = DatasetManifest.model_validate({"subjects": subjects}).model_copy(
            update={"base_dir": self.tmp}
        )

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_global_majority(self):
        table = style_table(self.manifest)
        self.assertEqual([r.rater_id for r in table.rows], ["a1", "a2", "b1"])
        # Nested count masks: the majority of {12, 10, 8} and {14, 10, 9} keeps 10 voxels.
        self.assertEqual(table.row("a1").bias, 3.0)
        self.assertEqual(table.row("a1").consistency, 1.0)
        self.assertEqual(table.row("a2").bias, 0.0)
        self.assertEqual(table.row("b1").bias, -1.5)
        self.assertEqual(table.row("b1").center_id, "B")
        self.assertEqual(table.row("b1").n_images, 2)

    def test_threads_do_not_change_results(self):
        self.assertEqual(style_table(self.manifest, threads=1), style_table(self.manifest, threads=3))

    def test_center_scope(self):
        table = style_table(self.manifest, consensus_scope=ConsensusScope.parse("center:A"))
        self.assertEqual([r.rater_id for r in table.rows], ["a1", "a2"])
        # Two-rater majority is the union of nested masks.
        self.assertEqual(table.row("a1").bias, 0.0)
        self.assertEqual(table.row("a2").bias, -3.0)

    def test_slice_wise_images(self):
        table = style_table(self.manifest, slice_wise=True)
        self.assertEqual(table.row("a1").n_images, 2)
        self.assertTrue(table.slice_wise)

    def test_staple_offsets(self):
        majority = style_table(self.manifest)
        staple_table = style_table(self.manifest, consensus_method=FusionMethod.STAPLE)
        report = compare_style_tables(majority, staple_table)
        self.assertEqual(set(report["bias_offsets"]), {"a1", "a2", "b1"})
        self.assertEqual(report["reference"], "majority")
        self.assertEqual(report["other"], "staple")

    def test_csv_round_trip(self):
        table = style_table(self.manifest)
        path = write_style_csv(table, self.tmp / "style.csv")
        loaded = read_style_csv(path)
        for original, row in zip(table.rows, loaded.rows):
            self.assertEqual((row.rater_id, row.center_id, row.n_images), (original.rater_id, original.center_id, original.n_images))
            self.assertAlmostEqual(row.bias, original.bias)
            self.assertAlmostEqual(row.consistency, original.consistency)
            self.assertAlmostEqual(row.relative_bias, original.relative_bias)

    def test_csv_keeps_consensus_description(self):
        table = style_table(self.manifest, consensus_method=FusionMethod.STAPLE)
        path = write_style_csv(table, self.tmp / "style_staple.csv")
        loaded = read_style_csv(path)
        self.assertEqual(loaded.consensus_method, FusionMethod.STAPLE)
        self.assertEqual(loaded.consensus_scope, table.consensus_scope)
        self.assertFalse(loaded.slice_wise)

    def test_csv_without_sidecar_reads_as_majority(self):
        path = write_style_csv(style_table(self.manifest, consensus_method=FusionMethod.STAPLE), self.tmp / "s.csv")
        meta_path(path).unlink()
        self.assertEqual(read_style_csv(path).consensus_method, FusionMethod.MAJORITY)


if __name__ == "__main__":
    unittest.main()
