"""
``pipeline``: simulate -> fuse -> style -> cluster -> uncertainty -> evaluate -> report.

Output layout under ``--out-dir``::

    cohort/                 manifest.json, raters.json, per-subject RVOL volumes
    consensus/              global majority and STAPLE consensuses, fusion.json
    style.csv               styles against the majority consensus
    style_staple.csv        styles against the STAPLE consensus
    style_offsets.json      STAPLE minus majority bias per rater
    cluster.json
    unc.csv
    dice.csv
    report.json
    plots/                  the six plot-data CSVs
"""
import argparse
import time
from pathlib import Path
from typing import List

from cli.arguments import add_tta_arguments, fusion_method, positive_int, predictor_spec, tta_ranges
from cli.commands.report import write_report
from cli.models import RunConfig
from cli.output import write_document, write_table
from services.clustering import cluster_report, points_from_style_table
from services.evaluation import evaluate_scopes
from services.fusion import fuse_subset, rater_filter_for
from services.models import FusionMethod
from services.scopes import model_scopes
from services.simulate import PRESETS, generate_cohort, load_rater_models, preset
from services.style_metrics import STYLE_META_KEY, compare_style_tables, style_frame, style_metadata, style_table
from services.uncertainty.harness import run_uncertainty
from services.volume_io import load_manifest, save_volume
from utils.logger import get_logger, log_stage_complete, log_stage_start

logger = get_logger(__name__)


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("pipeline", parents=parents, help="run the full analysis on a synthetic cohort")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="paper-shape")
    parser.add_argument("--subjects", type=positive_int, default=None, help="override the preset's subject count")
    parser.add_argument("--predictor", type=predictor_spec, default="synthetic:biased",
                        help="model standing in for each scope (default: synthetic:biased)")
    parser.add_argument("--consensus", type=fusion_method, default=FusionMethod.MAJORITY,
                        help="consensus for the headline style table")
    add_tta_arguments(parser)
    parser.add_argument("--out-dir", type=Path, default=Path("raterlab-out"))
    parser.set_defaults(handler=execute)


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.start = time.time()
        log_stage_start(self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            log_stage_complete(self.name, time.time() - self.start)
        return False


def execute(args: argparse.Namespace, config: RunConfig) -> List[str]:
    out = Path(args.out_dir)
    metadata = config.metadata()
    flags: List[str] = []

    with _Stage("simulate"):
        manifest_path = generate_cohort(preset(args.preset, args.subjects), config.seed, out / "cohort", metadata)
        manifest = load_manifest(manifest_path)
        rater_models = load_rater_models(manifest_path.parent / "raters.json")

    with _Stage("fuse"):
        everyone = rater_filter_for()
        summaries = {}
        for subject_id in manifest.subject_ids:
            majority = fuse_subset(manifest, subject_id, everyone, FusionMethod.MAJORITY)
            staple = fuse_subset(manifest, subject_id, everyone, FusionMethod.STAPLE)
            save_volume(majority.consensus, out / "consensus" / f"{subject_id}_majority.rvol", metadata)
            save_volume(staple.consensus, out / "consensus" / f"{subject_id}_staple.rvol", metadata)
            save_volume(staple.posterior, out / "consensus" / f"{subject_id}_staple_posterior.rvol", metadata)
            summaries[subject_id] = staple.summary()
            flags += [f"{subject_id}:{flag}" for flag in staple.flags]
        write_document(out / "consensus" / "fusion.json", {"staple": summaries}, config)

    with _Stage("style"):
        table = style_table(manifest, consensus_method=args.consensus, threads=config.threads)
        staple_table = style_table(manifest, consensus_method=FusionMethod.STAPLE, threads=config.threads)
        write_table(out / "style.csv", style_frame(table), config, extra={STYLE_META_KEY: style_metadata(table)})
        write_table(
            out / "style_staple.csv", style_frame(staple_table), config,
            extra={STYLE_META_KEY: style_metadata(staple_table)},
        )
        majority_table = table if args.consensus == FusionMethod.MAJORITY else style_table(manifest, threads=config.threads)
        write_document(out / "style_offsets.json", compare_style_tables(majority_table, staple_table), config)

    with _Stage("cluster"):
        cluster = cluster_report(points_from_style_table(table))
        write_document(out / "cluster.json", cluster.model_dump(mode="json"), config)

    scopes = model_scopes(manifest)
    with _Stage("uncertainty"):
        reports, uncertainty = run_uncertainty(
            manifest,
            args.predictor,
            scopes,
            n=args.n,
            ranges=tta_ranges(args),
            seed=config.seed,
            threads=config.threads,
            rater_models=rater_models,
            progress=lambda scope: logger.info(f"Running harness for {scope.label}"),
        )
        write_table(out / "unc.csv", uncertainty, config)
        flags += [f"{label}:{flag}" for label, r in reports.items() for flag in r.flags]

    with _Stage("evaluate"):
        dice_frame = evaluate_scopes(
            manifest, args.predictor, scopes, rater_models=rater_models, threads=config.threads
        )
        write_table(out / "dice.csv", dice_frame, config)

    with _Stage("report"):
        report = write_report(table, uncertainty, dice_frame, manifest, out / "report.json", out / "plots", config)

    ratio = report["comparison"]["consensus_ratio"]
    logger.info(
        f"Pipeline finished in {out}: DB index {cluster.db_index}, consensus uncertainty ratio {ratio}"
    )
    return flags + list(report["flags"])
