"""
``report``: comparison table, regressions and plot-data CSVs.
"""
import argparse
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from cli.models import RunConfig
from cli.output import write_document, write_table
from services.clustering import cluster_report, points_from_style_table
from services.evaluation import (
    build_plot_data,
    build_report,
    consensus_comparison,
    read_dice_csv,
    read_uncertainty_csv,
    scope_biases,
)
from services.models import DatasetManifest, StyleTable
from services.scopes import model_scopes
from services.style_metrics import read_style_csv
from services.volume_io import load_manifest


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("report", parents=parents, help="assemble report.json and plot data")
    parser.add_argument("--style", type=Path, required=True)
    parser.add_argument("--uncertainty", type=Path, required=True)
    parser.add_argument("--dice", type=Path)
    parser.add_argument("--manifest", type=Path, help="adds consensus biases against the cohort truth")
    parser.add_argument("--out", type=Path, required=True, help="report JSON path")
    parser.add_argument("--plots-dir", type=Path, help="directory for the plot-data CSVs")
    parser.set_defaults(handler=execute)


def write_report(
    style: StyleTable,
    uncertainty: pd.DataFrame,
    dice_frame: Optional[pd.DataFrame],
    manifest: Optional[DatasetManifest],
    out: Path,
    plots_dir: Optional[Path],
    config: RunConfig,
) -> Dict:
    biases = None
    if manifest is not None:
        consensus_scopes = [s for s in model_scopes(manifest) if s.label == "global" or s.label.startswith("center:")]
        biases = scope_biases(manifest, consensus_scopes, style.consensus_method)
    comparison = consensus_comparison(style, uncertainty, dice_frame, biases)
    cluster = cluster_report(points_from_style_table(style))
    report = build_report(style, comparison, cluster)
    write_document(out, report, config)
    if plots_dir is not None:
        for name, frame in build_plot_data(style, comparison).items():
            write_table(Path(plots_dir) / name, frame, config)
    return report


def execute(args: argparse.Namespace, config: RunConfig) -> List[str]:
    report = write_report(
        read_style_csv(args.style),
        read_uncertainty_csv(args.uncertainty),
        read_dice_csv(args.dice) if args.dice is not None else None,
        load_manifest(args.manifest) if args.manifest is not None else None,
        args.out,
        args.plots_dir,
        config,
    )
    return list(report["flags"])
