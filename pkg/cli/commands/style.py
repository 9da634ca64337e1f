"""
``style``: per-rater bias/consistency table against a consensus.
"""
import argparse
from pathlib import Path

from cli.arguments import consensus_scope, fusion_method
from cli.models import RunConfig
from cli.output import write_table
from services.models import ConsensusScope, FusionMethod
from services.style_metrics import STYLE_META_KEY, style_frame, style_metadata, style_table
from services.volume_io import load_manifest


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("style", parents=parents, help="measure rater styles")
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--consensus", type=fusion_method, default=FusionMethod.MAJORITY)
    parser.add_argument("--scope", type=consensus_scope, default=ConsensusScope(),
                        help="global, center:<id> or raters:<a>,<b>")
    parser.add_argument("--out", type=Path, required=True, help="style CSV path")
    parser.add_argument("--relative", action="store_true", help="fill the relative bias/consistency columns")
    parser.add_argument("--slice-wise", action="store_true", help="treat every axial slice as an image")
    parser.add_argument("--assd", action="store_true", help="add a mean_assd column")
    parser.set_defaults(handler=execute)


def execute(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = load_manifest(args.manifest)
    table = style_table(
        manifest,
        consensus_method=args.consensus,
        consensus_scope=args.scope,
        slice_wise=args.slice_wise,
        with_assd=args.assd,
        threads=config.threads,
    )
    frame = style_frame(table, with_assd=args.assd)
    if not args.relative:
        for column in ("relative_bias", "relative_consistency"):
            frame[column] = None
    write_table(args.out, frame, config, extra={STYLE_META_KEY: style_metadata(table)})
