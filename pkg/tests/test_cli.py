#!/usr/bin/env python3
"""
Command-line tests: exit codes, the step-by-step workflow and the pipeline.
"""
import json
import os
import re
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import pandas as pd

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cli.main import run
from services.evaluation import PLOT_FILES
from services.models import FusionMethod
from services.style_metrics import read_style_csv
from services.volume_io import load_volume

CREATED_AT = re.compile(rb'"created_at": "[^"]*"')


def snapshot(root: Path) -> dict:
    """Relative path -> file bytes with run timestamps blanked."""
    return {
        str(path.relative_to(root)): CREATED_AT.sub(b'"created_at": ""', path.read_bytes())
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


class TestExitCodes(unittest.TestCase):
    """Usage errors exit 2, domain errors exit 1."""

    def test_version(self):
        self.assertEqual(run(["--version"]), 0)

    def test_usage_errors(self):
        self.assertEqual(run([]), 2)
        self.assertEqual(run(["style", "--bogus"]), 2)
        self.assertEqual(run(["fuse", "--manifest", "m.json", "--subject", "s", "--out", "o.rvol", "--method", "vote"]), 2)
        self.assertEqual(run(["--seed", "-1", "simulate", "--preset", "desk", "--out-dir", "x"]), 2)

    def test_domain_error(self):
        tmp = Path(tempfile.mkdtemp())
        try:
            code = run(["style", "--manifest", str(tmp / "missing.json"), "--out", str(tmp / "style.csv")])
            self.assertEqual(code, 1)
        finally:
            shutil.rmtree(tmp)


class TestWorkflow(unittest.TestCase):
    """simulate -> fuse -> style -> cluster -> uncertainty -> evaluate -> report."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = Path(tempfile.mkdtemp())
        cls.cohort = cls.tmp / "cohort"
        code = run(["--seed", "5", "simulate", "--preset", "desk", "--subjects", "2", "--out-dir", str(cls.cohort)])
        assert code == 0, code
        cls.manifest = cls.cohort / "manifest.json"

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def test_fuse_staple_with_posterior(self):
        out, posterior = self.tmp / "cons.rvol", self.tmp / "post.rvol"
        code = run([
            "fuse", "--manifest", str(self.manifest), "--subject", "sub-01",
            "--method", "staple", "--out", str(out), "--posterior", str(posterior),
        ])
        self.assertEqual(code, 0)
        self.assertEqual(load_volume(out).kind.value, "mask")
        self.assertEqual(load_volume(posterior).kind.value, "prob")
        header = json.loads(out.read_text())
        self.assertEqual(header["metadata"]["fusion"]["method"], "staple")

    def test_fuse_center_majority(self):
        out = self.tmp / "center_a.rvol"
        code = run(["fuse", "--manifest", str(self.manifest), "--subject", "sub-02", "--center", "A", "--out", str(out)])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out.read_text())["metadata"]["fusion"]["rater_ids"], ["a1", "a2"])

    def test_flagged_fusion_exits_one(self):
        out = self.tmp / "capped.rvol"
        code = run([
            "fuse", "--manifest", str(self.manifest), "--subject", "sub-01", "--method", "staple",
            "--max-iters", "1", "--tol", "1e-300", "--out", str(out),
        ])
        self.assertEqual(code, 1)
        # The consensus is still written; the flag rides along in its header.
        header = json.loads(out.read_text())
        self.assertIn("max_iters_reached", header["metadata"]["fusion"]["flags"])

    def test_report_follows_staple_style_table(self):
        work = self.tmp / "staple"
        style, unc, report = work / "style.csv", work / "unc.csv", work / "report.json"
        code = run(["style", "--manifest", str(self.manifest), "--consensus", "staple", "--relative", "--out", str(style)])
        self.assertEqual(code, 0)
        self.assertEqual(read_style_csv(style).consensus_method, FusionMethod.STAPLE)
        code = run([
            "--seed", "1", "uncertainty", "--manifest", str(self.manifest), "--predictor", "synthetic:biased",
            "--n", "2", "--out", str(unc),
        ])
        self.assertEqual(code, 0)
        code = run([
            "report", "--style", str(style), "--uncertainty", str(unc), "--manifest", str(self.manifest),
            "--out", str(report),
        ])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(report.read_text())["consensus_method"], "staple")

    def test_posterior_needs_staple(self):
        code = run([
            "fuse", "--manifest", str(self.manifest), "--subject", "sub-01",
            "--out", str(self.tmp / "x.rvol"), "--posterior", str(self.tmp / "p.rvol"),
        ])
        self.assertEqual(code, 1)

    def test_style_cluster_uncertainty_evaluate_report(self):
        style = self.tmp / "style.csv"
        self.assertEqual(run(["style", "--manifest", str(self.manifest), "--out", str(style), "--relative"]), 0)
        frame = pd.read_csv(style)
        self.assertEqual(list(frame["rater_id"]), ["a1", "a2", "b1", "c1"])
        self.assertTrue(frame["relative_bias"].notna().all())
        sidecar = json.loads((self.tmp / "style.csv.meta.json").read_text())
        self.assertEqual(sidecar["command"], "style")
        self.assertEqual(sidecar["rows"], 4)

        cluster = self.tmp / "cluster.json"
        self.assertEqual(run(["cluster", "--style", str(style), "--out", str(cluster)]), 0)
        self.assertEqual(json.loads(cluster.read_text())["n_clusters"], 3)

        unc = self.tmp / "unc.csv"
        maps = self.tmp / "maps"
        code = run([
            "--seed", "2", "uncertainty", "--manifest", str(self.manifest), "--predictor", "synthetic:biased",
            "--n", "4", "--out", str(unc), "--maps-dir", str(maps),
        ])
        self.assertEqual(code, 0)
        unc_frame = pd.read_csv(unc)
        self.assertEqual(
            sorted(set(unc_frame["rater_id"])), ["a1", "a2", "b1", "c1", "center:A", "center:B", "center:C", "global"]
        )
        self.assertEqual(len(unc_frame), 16)
        self.assertTrue((unc_frame["seed"] == 2).all())
        self.assertEqual(load_volume(maps / "center_A" / "sub-01_entropy.rvol").kind.value, "image")

        dice = self.tmp / "dice.csv"
        code = run(["evaluate", "--manifest", str(self.manifest), "--predictor", "synthetic:biased", "--out", str(dice)])
        self.assertEqual(code, 0)
        dice_frame = pd.read_csv(dice)
        self.assertTrue(dice_frame["dice"].between(0.0, 1.0).all())

        report, plots = self.tmp / "report.json", self.tmp / "plots"
        code = run([
            "report", "--style", str(style), "--uncertainty", str(unc), "--dice", str(dice),
            "--manifest", str(self.manifest), "--out", str(report), "--plots-dir", str(plots),
        ])
        self.assertEqual(code, 0)
        document = json.loads(report.read_text())
        self.assertEqual(document["entropy_unit"], "nats")
        self.assertIsNotNone(document["comparison"]["consensus_ratio"])
        for name in PLOT_FILES:
            self.assertTrue((plots / name).is_file(), name)


class TestPipeline(unittest.TestCase):
    """The one-shot pipeline on the desk preset."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.argv = [
            "--seed", "3", "--threads", "2", "pipeline", "--preset", "desk", "--subjects", "2",
            "--n", "4", "--out-dir", str(self.tmp),
        ]

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_outputs_and_rerun(self):
        self.assertEqual(run(self.argv), 0)
        for name in ("style.csv", "style_staple.csv", "unc.csv", "dice.csv"):
            self.assertTrue((self.tmp / name).is_file(), name)
            self.assertTrue((self.tmp / f"{name}.meta.json").is_file(), name)
        for name in PLOT_FILES:
            self.assertTrue((self.tmp / "plots" / name).is_file(), name)
        for name in ("report.json", "cluster.json", "style_offsets.json", "consensus/fusion.json"):
            self.assertTrue((self.tmp / name).is_file(), name)
        self.assertTrue((self.tmp / "consensus" / "sub-01_staple_posterior.rvol").is_file())

        report = json.loads((self.tmp / "report.json").read_text())
        self.assertEqual(report["config"]["seed"], 3)
        self.assertEqual(report["config"]["command"], "pipeline")

        first = snapshot(self.tmp)
        self.assertEqual(run(self.argv), 0)
        second = snapshot(self.tmp)
        self.assertEqual(sorted(first), sorted(second))
        for name in first:
            self.assertEqual(first[name], second[name], name)

    def test_paper_shape_preset(self):
        argv = [
            "--seed", "7", "pipeline", "--preset", "paper-shape", "--subjects", "2", "--n", "2",
            "--out-dir", str(self.tmp),
        ]
        self.assertEqual(run(argv), 0)
        style = pd.read_csv(self.tmp / "style.csv")
        self.assertEqual(list(style["rater_id"]), ["a1", "a2", "a3", "a4", "b1", "b2", "c1"])
        self.assertEqual(read_style_csv(self.tmp / "style_staple.csv").consensus_method, FusionMethod.STAPLE)
        self.assertEqual(json.loads((self.tmp / "cluster.json").read_text())["n_clusters"], 3)
        unc = pd.read_csv(self.tmp / "unc.csv")
        # 7 raters, 3 centers and the global consensus, over 2 subjects.
        self.assertEqual(len(unc), 22)
        report = json.loads((self.tmp / "report.json").read_text())
        self.assertEqual(report["config"]["seed"], 7)
        self.assertEqual(report["config"]["options"]["preset"], "paper-shape")
        self.assertEqual(report["flags"], [])
        for name in PLOT_FILES:
            self.assertTrue((self.tmp / "plots" / name).is_file(), name)

        first = snapshot(self.tmp)
        self.assertEqual(run(argv), 0)
        self.assertEqual(first, snapshot(self.tmp))


if __name__ == "__main__":
    unittest.main()
