"""
``cluster``: center-wise clustering report of a style table.
"""
import argparse
from pathlib import Path
from typing import List

from cli.models import RunConfig
from cli.output import write_document
from services.clustering import cluster_report, points_from_style_table
from services.style_metrics import read_style_csv


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("cluster", parents=parents, help="cluster rater styles by center")
    parser.add_argument("--style", type=Path, required=True, help="style CSV")
    parser.add_argument("--out", type=Path, required=True, help="cluster report JSON")
    parser.set_defaults(handler=execute)


def execute(args: argparse.Namespace, config: RunConfig) -> List[str]:
    report = cluster_report(points_from_style_table(read_style_csv(args.style)))
    write_document(args.out, report.model_dump(mode="json"), config)
    return list(report.flags)
