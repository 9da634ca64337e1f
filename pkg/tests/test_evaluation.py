#!/usr/bin/env python3
"""
Tests for Dice, OLS R², the consensus comparison table and the report.
"""
import os
import sys
import unittest

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.errors import EvaluationError, GeometryMismatchError
from services.evaluation import (
    PLOT_FILES,
    build_plot_data,
    build_report,
    consensus_comparison,
    dice,
    ols_r2,
)
from services.models import ModelScopeKind, RaterStyle, StyleTable, Volume
from services.uncertainty.harness import UNCERTAINTY_COLUMNS


def mask(values) -> Volume:
    return Volume.from_array(np.asarray(values, dtype=np.uint8).reshape(-1, 1, 1))


def style_rows(*rows) -> StyleTable:
    return StyleTable(rows=[
        RaterStyle(rater_id=r, center_id=c, n_images=4, bias=b, consistency=1.0, relative_bias=b / 100.0)
        for r, c, b in rows
    ])


def uncertainty_frame(values) -> pd.DataFrame:
    records = [
        {"rater_id": label, "image_id": f"s{i}", "mean_entropy_union": u, "mean_entropy_all": u / 10.0,
         "n_samples": 10, "seed": 0}
        for label, per_image in values.items()
        for i, u in enumerate(per_image)
    ]
    return pd.DataFrame.from_records(records, columns=UNCERTAINTY_COLUMNS)


class TestDice(unittest.TestCase):
    """Dice overlap."""

    def test_examples(self):
        self.assertEqual(dice(mask([1, 1, 0, 0]), mask([1, 1, 0, 0])), 1.0)
        self.assertEqual(dice(mask([1, 1, 0, 0]), mask([0, 0, 1, 1])), 0.0)
        self.assertAlmostEqual(dice(mask([1, 1, 1, 0]), mask([0, 1, 1, 1])), 2.0 / 3.0)

    def test_both_empty(self):
        self.assertEqual(dice(mask([0, 0]), mask([0, 0])), 1.0)

    def test_geometry_mismatch(self):
        with self.assertRaises(GeometryMismatchError):
            dice(mask([1, 0]), mask([1, 0, 0]))


class TestOls(unittest.TestCase):
    """Least squares fit and R²."""

    def test_perfect_line(self):
        result = ols_r2([1, 2, 3, 4], [3, 5, 7, 9])
        self.assertAlmostEqual(result.slope, 2.0)
        self.assertAlmostEqual(result.intercept, 1.0)
        self.assertAlmostEqual(result.r_squared, 1.0)

    def test_known_r_squared(self):
        # Sxy = 6, Sxx = 5, Syy = 9.
        result = ols_r2([0, 1, 2, 3], [0, 0, 3, 3])
        self.assertAlmostEqual(result.r_squared, 0.8)
        result = ols_r2([1, 2, 3], [1, 3, 2])
        self.assertAlmostEqual(result.r_squared, 0.25)

    def test_matches_pearson_squared(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = int(rng.integers(3, 30))
            x = rng.normal(size=n)
            y = 0.5 * x + rng.normal(size=n)
            self.assertAlmostEqual(ols_r2(x, y).r_squared, pearsonr(x, y)[0] ** 2, delta=1e-12)

    def test_degenerate_inputs(self):
        with self.assertRaises(EvaluationError):
            ols_r2([1, 1, 1], [1, 2, 3])
        with self.assertRaises(EvaluationError):
            ols_r2([1, 2, 3], [2, 2, 2])
        with self.assertRaises(EvaluationError):
            ols_r2([1, 2], [1, 2])
        with self.assertRaises(EvaluationError):
            ols_r2([1, 2, float("nan")], [1, 2, 3])
        with self.assertRaises(EvaluationError):
            ols_r2([1, 2, 3], [1, 2])


class TestComparison(unittest.TestCase):
    """Rater, consensus and raters-average rows."""

    def setUp(self):
        self.style = style_rows(("a1", "A", 10.0), ("a2", "A", 20.0), ("b1", "B", -10.0))
        self.uncertainty = uncertainty_frame({
            "a1": [0.3, 0.5],
            "a2": [0.5, 0.7],
            "b1": [0.2, 0.2],
            "center:A": [0.3, 0.3],
            "global": [0.2, 0.2],
        })
        self.dice = pd.DataFrame({
            "scope": ["a1", "a2", "b1", "global"],
            "subject_id": ["s0"] * 4,
            "dice": [0.9, 0.8, 0.7, 0.95],
            "both_empty": [False] * 4,
        })

    def test_rows_and_ratio(self):
        table = consensus_comparison(self.style, self.uncertainty, self.dice, biases={"global": 0.5})
        kinds = [r.scope for r in table.rows]
        self.assertEqual(kinds, [
            ModelScopeKind.RATER, ModelScopeKind.RATER, ModelScopeKind.RATER,
            ModelScopeKind.CENTER_CONSENSUS, ModelScopeKind.GLOBAL_CONSENSUS, ModelScopeKind.RATERS_AVERAGE,
        ])
        average = table.rows[-1]
        self.assertAlmostEqual(average.uncertainty, 0.4)
        self.assertAlmostEqual(average.bias, 20.0 / 3.0)
        self.assertAlmostEqual(table.consensus_ratio, 0.5)
        global_row = table.rows[4]
        self.assertEqual(global_row.bias, 0.5)
        self.assertEqual(global_row.dice, 0.95)
        self.assertEqual(table.rows[3].center_id, "A")
        self.assertIsNone(table.rows[3].dice)
        self.assertEqual(table.flags, [])

    def test_single_rater(self):
        style = style_rows(("a1", "A", 10.0))
        table = consensus_comparison(style, uncertainty_frame({"a1": [0.3]}))
        self.assertEqual(len(table.rows), 1)
        self.assertIsNone(table.consensus_ratio)
        self.assertIn("consensus_ratio_undefined", table.flags)

    def test_missing_and_unknown_scopes(self):
        frame = uncertainty_frame({"a1": [0.3], "zz": [0.1], "global": [0.2]})
        table = consensus_comparison(self.style, frame, self.dice)
        self.assertIn("missing_uncertainty:a2", table.flags)
        self.assertIn("missing_uncertainty:b1", table.flags)
        self.assertIn("unknown_scope:zz", table.flags)
        self.assertNotIn("missing_dice:a1", table.flags)

    def test_plot_data(self):
        table = consensus_comparison(self.style, self.uncertainty, self.dice)
        frames = build_plot_data(self.style, table)
        self.assertEqual(tuple(frames), PLOT_FILES)
        self.assertEqual(list(frames["fig1_style.csv"]["rater_id"]), ["a1", "a2", "b1"])
        self.assertEqual(list(frames["fig5_consensus.csv"]["label"]), ["a1", "a2", "b1", "raters-average", "global"])
        fig7 = frames["fig7_per_center.csv"].set_index("center_id")
        self.assertAlmostEqual(fig7.loc["A", "raters_mean_uncertainty"], 0.5)
        self.assertAlmostEqual(fig7.loc["A", "center_consensus_uncertainty"], 0.3)
        self.assertTrue(pd.isna(fig7.loc["B", "center_consensus_uncertainty"]))
        self.assertEqual(len(frames["table1_dice.csv"]), len(table.rows))

    def test_report(self):
        table = consensus_comparison(self.style, self.uncertainty, self.dice)
        report = build_report(self.style, table, config={"seed": 0})
        self.assertEqual(report["entropy_unit"], "nats")
        self.assertEqual(report["config"], {"seed": 0})
        regression = report["regressions"]["uncertainty_vs_bias"]
        self.assertEqual(regression["n"], 3)
        self.assertGreater(regression["slope"], 0.0)
        self.assertIsNotNone(report["regressions"]["dice_vs_bias"])

    def test_report_flags_undefined_regressions(self):
        style = style_rows(("a1", "A", 1.0), ("a2", "A", 2.0))
        table = consensus_comparison(style, uncertainty_frame({"a1": [0.1], "a2": [0.2]}))
        report = build_report(style, table)
        self.assertIsNone(report["regressions"]["uncertainty_vs_bias"])
        self.assertTrue(any(f.startswith("uncertainty_vs_bias_undefined") for f in report["flags"]))
        # No Dice table was given: the regression is absent, not degenerate.
        self.assertIsNone(report["regressions"]["dice_vs_bias"])
        self.assertFalse(any(f.startswith("dice_vs_bias") for f in report["flags"]))


if __name__ == "__main__":
    unittest.main()
