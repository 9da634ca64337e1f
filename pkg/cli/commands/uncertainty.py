"""
``uncertainty``: test-time augmentation entropy per model scope and image.
"""
import argparse
from pathlib import Path
from typing import List

from cli.arguments import add_tta_arguments, predictor_spec, rater_models_path, tta_ranges
from cli.models import RunConfig
from cli.output import write_table
from services.scopes import SCOPE_SETS, model_scopes
from services.simulate import load_rater_models
from services.uncertainty.harness import run_uncertainty
from services.volume_io import load_manifest
from utils.logger import get_logger

logger = get_logger(__name__)


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("uncertainty", parents=parents, help="TTA entropy uncertainty")
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--predictor", type=predictor_spec, required=True,
                        help="precomputed:<dir>, cmd:<argv> or synthetic:<name>[:k=v,...]")
    add_tta_arguments(parser)
    parser.add_argument("--scopes", choices=SCOPE_SETS, default="all", help="model scopes to run")
    parser.add_argument("--raters-json", type=Path, help="rater models (default: raters.json next to the manifest)")
    parser.add_argument("--out", type=Path, required=True, help="uncertainty CSV path")
    parser.add_argument("--maps-dir", type=Path, help="write entropy maps as RVOL here")
    parser.set_defaults(handler=execute)


def execute(args: argparse.Namespace, config: RunConfig) -> List[str]:
    manifest = load_manifest(args.manifest)
    models_path = rater_models_path(args, args.manifest)
    rater_models = load_rater_models(models_path) if models_path is not None else None
    scopes = model_scopes(manifest, args.scopes)
    reports, frame = run_uncertainty(
        manifest,
        args.predictor,
        scopes,
        n=args.n,
        ranges=tta_ranges(args),
        seed=config.seed,
        threads=config.threads,
        rater_models=rater_models,
        maps_dir=args.maps_dir,
        metadata=config.metadata({"entropy_unit": "nats"}) if args.maps_dir else None,
        progress=lambda scope: logger.info(f"Running harness for {scope.label}"),
    )
    flagged = {label: r.flags for label, r in reports.items() if r.flags}
    if flagged:
        logger.warning(f"Uncertainty flags: {flagged}")
    write_table(args.out, frame, config)
    return [f"{label}:{flag}" for label, flags in flagged.items() for flag in flags]
