"""
``fuse``: consensus of one subject's raters.
"""
import argparse
from pathlib import Path
from typing import List

from cli.arguments import csv_list, fusion_method, positive_int
from cli.models import RunConfig
from services.errors import FusionError
from services.fusion import fuse_subset, rater_filter_for
from services.models import FusionMethod, StapleParams
from services.volume_io import load_manifest, save_volume
from utils.logger import get_logger

logger = get_logger(__name__)


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("fuse", parents=parents, help="fuse rater masks into a consensus")
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--subject", required=True)
    parser.add_argument("--method", type=fusion_method, default=FusionMethod.MAJORITY,
                        help="majority, staple or center-weighted")
    selection = parser.add_mutually_exclusive_group()
    selection.add_argument("--center", help="fuse only this center's raters")
    selection.add_argument("--raters", type=csv_list, help="fuse only these raters (comma-separated)")
    parser.add_argument("--out", type=Path, required=True, help="consensus RVOL header path")
    parser.add_argument("--posterior", type=Path, help="STAPLE posterior RVOL header path")
    parser.add_argument("--tol", type=float, default=None, help="STAPLE convergence tolerance")
    parser.add_argument("--max-iters", type=positive_int, default=None, help="STAPLE iteration cap")
    parser.set_defaults(handler=execute)


def execute(args: argparse.Namespace, config: RunConfig) -> List[str]:
    manifest = load_manifest(args.manifest)
    init = None
    if args.method == FusionMethod.STAPLE:
        controls = {}
        if args.tol is not None:
            controls["tol"] = args.tol
        if args.max_iters is not None:
            controls["max_iters"] = args.max_iters
        subject = manifest.subject(args.subject)
        selected = [e for e in subject.entries if rater_filter_for(args.center, args.raters)(e.rater_id, e.center_id)]
        init = StapleParams.initial(max(len(selected), 1), **controls)
    elif args.posterior is not None:
        raise FusionError("--posterior is only produced by --method staple")

    result = fuse_subset(manifest, args.subject, rater_filter_for(args.center, args.raters), args.method, init)
    metadata = config.metadata({"fusion": result.summary(), "subject": args.subject})
    save_volume(result.consensus, args.out, metadata=metadata)
    if args.posterior is not None:
        save_volume(result.posterior, args.posterior, metadata=metadata)
    if result.flags:
        logger.warning(f"Fusion flags for {args.subject}: {result.flags}")
    logger.info(f"Consensus of {len(result.rater_ids)} raters written to {args.out}")
    return list(result.flags)
