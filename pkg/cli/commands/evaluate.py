"""
``evaluate``: Dice of each scope's model against the same scope's ground truth.
"""
import argparse
from pathlib import Path

from cli.arguments import fusion_method, predictor_spec, rater_models_path
from cli.models import RunConfig
from cli.output import write_table
from services.evaluation import evaluate_scopes
from services.models import FusionMethod
from services.scopes import SCOPE_SETS, model_scopes
from services.simulate import load_rater_models
from services.volume_io import load_manifest


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("evaluate", parents=parents, help="Dice per model scope and subject")
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--predictor", type=predictor_spec, required=True)
    parser.add_argument("--scopes", choices=SCOPE_SETS, default="all")
    parser.add_argument("--consensus", type=fusion_method, default=FusionMethod.MAJORITY,
                        help="fusion method for consensus ground truths")
    parser.add_argument("--raters-json", type=Path)
    parser.add_argument("--out", type=Path, required=True, help="dice CSV path")
    parser.set_defaults(handler=execute)


def execute(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = load_manifest(args.manifest)
    models_path = rater_models_path(args, args.manifest)
    frame = evaluate_scopes(
        manifest,
        args.predictor,
        model_scopes(manifest, args.scopes),
        rater_models=load_rater_models(models_path) if models_path is not None else None,
        method=args.consensus,
        threads=config.threads,
    )
    write_table(args.out, frame, config)
