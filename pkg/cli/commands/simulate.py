"""
``simulate``: write a synthetic cohort (manifest, rater models, RVOL volumes).
"""
import argparse
from pathlib import Path

from cli.arguments import float_pair, float_triple, int_triple, positive_int
from cli.models import RunConfig
from services.errors import SimulationError
from services.models import Geometry
from services.simulate import PRESETS, CohortPreset, generate_cohort, load_rater_models, preset


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("simulate", parents=parents, help="generate a synthetic cohort")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--raters", type=Path, help="JSON list of rater models")
    source.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--geometry", type=int_triple, help="dims x,y,z (default: preset or 64,64,8)")
    parser.add_argument("--spacing", type=float_triple, default=None, help="mm per voxel x,y,z")
    parser.add_argument("--subjects", type=positive_int, default=None)
    parser.add_argument("--objects", type=positive_int, default=None, help="ellipsoids per phantom")
    parser.add_argument("--size-range", type=float_pair, default=None, help="radius range in mm, min,max")
    parser.add_argument("--out-dir", type=Path, required=True)
    parser.set_defaults(handler=execute)


def cohort_from_args(args: argparse.Namespace) -> CohortPreset:
    if args.preset is not None:
        cohort = preset(args.preset)
    else:
        cohort = CohortPreset(
            geometry=Geometry(dims=(64, 64, 8)),
            n_subjects=20,
            raters=list(load_rater_models(args.raters).values()),
        )
    updates = {}
    if args.geometry is not None or args.spacing is not None:
        updates["geometry"] = Geometry(
            dims=args.geometry or cohort.geometry.dims,
            spacing=args.spacing or cohort.geometry.spacing,
        )
    if args.subjects is not None:
        updates["n_subjects"] = args.subjects
    if args.objects is not None:
        updates["n_objects"] = args.objects
    if args.size_range is not None:
        if not 0 < args.size_range[0] <= args.size_range[1]:
            raise SimulationError(f"invalid size range {args.size_range}")
        updates["size_range"] = args.size_range
    return cohort.model_copy(update=updates)


def execute(args: argparse.Namespace, config: RunConfig) -> None:
    generate_cohort(cohort_from_args(args), config.seed, args.out_dir, metadata=config.metadata())
