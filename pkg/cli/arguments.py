"""
Argument types shared by the subcommands. Invalid values raise
``argparse.ArgumentTypeError`` so they surface as usage errors (exit 2).
"""
import argparse
from pathlib import Path
from typing import List, Tuple

from config.settings import settings
from services.models import ConsensusScope, FusionMethod, TtaRanges


def csv_list(text: str) -> List[str]:
    items = [item.strip() for item in text.split(",") if item.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _numbers(text: str, count: int, kind):
    parts = text.split(",")
    if len(parts) != count:
        raise argparse.ArgumentTypeError(f"expected {count} comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def int_triple(text: str) -> Tuple[int, int, int]:
    values = _numbers(text, 3, int)
    if any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"dimensions must be >= 1, got {text!r}")
    return values


def float_triple(text: str) -> Tuple[float, float, float]:
    values = _numbers(text, 3, float)
    if any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f"spacing must be > 0, got {text!r}")
    return values


def float_pair(text: str) -> Tuple[float, float]:
    return _numbers(text, 2, float)


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def seed_value(text: str) -> int:
    try:
        value = int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e
    if value < 0:
        raise argparse.ArgumentTypeError("seeds must be >= 0")
    return value


def consensus_scope(text: str) -> ConsensusScope:
    try:
        return ConsensusScope.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def fusion_method(text: str) -> FusionMethod:
    try:
        return FusionMethod(text)
    except ValueError as e:
        choices = ", ".join(m.value for m in FusionMethod)
        raise argparse.ArgumentTypeError(f"unknown method {text!r}; expected one of {choices}") from e


def predictor_spec(text: str) -> str:
    family, sep, rest = text.partition(":")
    if not sep or not rest or family not in ("precomputed", "cmd", "synthetic"):
        raise argparse.ArgumentTypeError(
            f"invalid predictor {text!r}; expected precomputed:<dir>, cmd:<argv> or synthetic:<name>"
        )
    return text


def add_tta_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n", type=positive_int, default=settings.mc_samples, help="Monte-Carlo samples per plane")
    parser.add_argument("--rot", type=float, default=settings.tta_rotation_deg, help="rotation range, +- degrees")
    parser.add_argument("--trans", type=float, default=settings.tta_translation_px, help="translation range, +- pixels")
    parser.add_argument("--scale", type=float, default=settings.tta_scale_delta, help="scale range, 1 +- delta")


def tta_ranges(args: argparse.Namespace) -> TtaRanges:
    return TtaRanges.symmetric(args.rot, args.trans, args.scale)


def rater_models_path(args: argparse.Namespace, manifest_path: Path):
    """Explicit ``--raters-json`` or the cohort's ``raters.json`` next to the manifest, if any."""
    if getattr(args, "raters_json", None):
        return Path(args.raters_json)
    candidate = Path(manifest_path).parent / "raters.json"
    return candidate if candidate.is_file() else None
