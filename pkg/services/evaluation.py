"""
Segmentation and correlation evaluation for RaterLab: Dice, OLS R², the
rater/consensus comparison table and the plot-data frames built from it.
"""
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config.settings import settings
from services.errors import EvaluationError, GeometryMismatchError
from services.models import (
    ClusterReport,
    ComparisonRow,
    ComparisonTable,
    DatasetManifest,
    FusionMethod,
    ModelScope,
    ModelScopeKind,
    RaterModel,
    RegressionResult,
    StyleTable,
    Volume,
)
from services.scopes import scope_ground_truth
from services.style_metrics import bias as count_bias
from services.uncertainty.harness import UNCERTAINTY_COLUMNS, load_intensity, predict_volume
from services.uncertainty.predictors import predictor_for_scope
from services.volume import positive_count
from services.volume_io import load_volume
from utils.logger import get_logger

logger = get_logger(__name__)

DICE_COLUMNS = ["scope", "subject_id", "dice", "both_empty"]

PLOT_FILES = (
    "fig1_style.csv",
    "fig2_unc_vs_bias.csv",
    "fig4_dice_vs_bias.csv",
    "fig5_consensus.csv",
    "fig7_per_center.csv",
    "table1_dice.csv",
)


def dice(a: Volume, b: Volume) -> float:
    """
    Dice overlap ``2|A n B| / (|A| + |B|)``.

    Two empty masks score ``settings.dice_empty_value`` (1.0 by default).

    Args:
        a: Binary mask
        b: Binary mask on the same geometry

    Returns:
        Dice score in [0, 1]
    """
    if a.geometry != b.geometry:
        raise GeometryMismatchError(f"dice of {a.geometry.dims} and {b.geometry.dims} volumes")
    size = positive_count(a) + positive_count(b)
    if size == 0:
        return settings.dice_empty_value
    overlap = int(np.count_nonzero(a.as_bool() & b.as_bool()))
    return 2.0 * overlap / size


def ols_r2(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """
    Ordinary least squares fit ``y = slope * x + intercept`` and its R².

    Raises:
        EvaluationError: fewer than 3 points, unequal lengths, non-finite values,
            or zero variance in x or y
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError(f"x and y must be equal-length lists, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise EvaluationError(f"regression needs at least 3 points, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise EvaluationError("regression inputs must be finite")

    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0:
        raise EvaluationError("degenerate regression: x has zero variance")
    if syy == 0.0:
        raise EvaluationError("degenerate regression: y has zero variance")

    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    residual = y - (slope * x + intercept)
    r_squared = 1.0 - float(residual @ residual) / syy
    return RegressionResult(
        slope=slope, intercept=intercept, r_squared=min(1.0, max(0.0, r_squared)), n=int(x.size)
    )


# Scope evaluation
def _subject_dice(
    manifest: DatasetManifest,
    subject_id: str,
    scope: ModelScope,
    predictor,
    method: FusionMethod,
) -> Optional[Tuple[float, bool]]:
    truth = scope_ground_truth(manifest, subject_id, scope, method)
    if truth is None:
        return None
    prediction = predict_volume(load_intensity(manifest, subject_id), predictor)
    both_empty = positive_count(truth) == 0 and positive_count(prediction) == 0
    return dice(prediction, truth), both_empty


def evaluate_scopes(
    manifest: DatasetManifest,
    predictor_spec: str,
    scopes: Sequence[ModelScope],
    rater_models: Optional[Dict[str, RaterModel]] = None,
    method: FusionMethod = FusionMethod.MAJORITY,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Dice of each scope's model against the ground truth of the same scope.

    Subjects the scope's raters did not annotate are skipped.

    Returns:
        Frame with ``DICE_COLUMNS``, ordered by scope then subject
    """
    records = []
    for scope in scopes:
        predictor = predictor_for_scope(predictor_spec, scope, rater_models)
        results = Parallel(n_jobs=threads, prefer="threads")(
            delayed(_subject_dice)(manifest, sid, scope, predictor, method) for sid in manifest.subject_ids
        )
        for subject_id, result in zip(manifest.subject_ids, results):
            if result is None:
                continue
            score, both_empty = result
            if both_empty:
                logger.warning(f"{scope.label}/{subject_id}: prediction and truth both empty")
            records.append(
                {"scope": scope.label, "subject_id": subject_id, "dice": score, "both_empty": both_empty}
            )
    return pd.DataFrame.from_records(records, columns=DICE_COLUMNS)


def scope_biases(
    manifest: DatasetManifest,
    scopes: Sequence[ModelScope],
    method: FusionMethod = FusionMethod.MAJORITY,
) -> Dict[str, float]:
    """
    Bias (mean positive-count difference) of each scope's ground truth
    against a reference truth: the subjects' ``truth_path`` volumes when every
    subject has one, the global consensus otherwise.

    Returns:
        scope label -> bias in voxels
    """
    subjects = manifest.subjects
    use_truth = all(s.truth_path for s in subjects)
    everyone = manifest.rater_centers()
    global_scope = ModelScope(label="global", kind=ModelScopeKind.GLOBAL_CONSENSUS, rater_ids=list(everyone))
    references: Dict[str, Volume] = {}
    for subject in subjects:
        if use_truth:
            references[subject.subject_id] = load_volume(manifest.resolve(subject.truth_path))
        else:
            references[subject.subject_id] = scope_ground_truth(manifest, subject.subject_id, global_scope, method)

    biases: Dict[str, float] = {}
    for scope in scopes:
        pairs = [
            (truth, references[sid])
            for sid in manifest.subject_ids
            if (truth := scope_ground_truth(manifest, sid, scope, method)) is not None
        ]
        if pairs:
            biases[scope.label] = count_bias([p[0] for p in pairs], [p[1] for p in pairs])
    logger.debug(f"Scope biases against {'simulated truth' if use_truth else 'global consensus'}: {biases}")
    return biases


# Comparison table
def _check_columns(frame: pd.DataFrame, columns: Sequence[str], what: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise EvaluationError(f"{what} lacks columns {missing}")


def read_uncertainty_csv(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"rater_id": str, "image_id": str})
    _check_columns(frame, UNCERTAINTY_COLUMNS, str(path))
    return frame


def read_dice_csv(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"scope": str, "subject_id": str})
    _check_columns(frame, ["scope", "subject_id", "dice"], str(path))
    return frame


def _scope_kind(label: str) -> ModelScopeKind:
    if label == "global":
        return ModelScopeKind.GLOBAL_CONSENSUS
    if label.startswith("center:"):
        return ModelScopeKind.CENTER_CONSENSUS
    return ModelScopeKind.RATER


def _mean_or_none(values) -> Optional[float]:
    values = pd.Series(values, dtype="float64").dropna()
    return float(values.mean()) if len(values) else None


def _scope_means(uncertainty: Optional[pd.DataFrame], dice_frame: Optional[pd.DataFrame]):
    union, every, scores = {}, {}, {}
    if uncertainty is not None and len(uncertainty):
        for label, group in uncertainty.groupby("rater_id", sort=True):
            union[label] = _mean_or_none(group["mean_entropy_union"])
            every[label] = _mean_or_none(group["mean_entropy_all"])
    if dice_frame is not None and len(dice_frame):
        for label, group in dice_frame.groupby("scope", sort=True):
            scores[label] = _mean_or_none(group["dice"])
    return union, every, scores


def consensus_comparison(
    style: StyleTable,
    uncertainty: Optional[pd.DataFrame] = None,
    dice_frame: Optional[pd.DataFrame] = None,
    biases: Optional[Dict[str, float]] = None,
) -> ComparisonTable:
    """
    Rater, center-consensus and global-consensus rows plus the raters-average row.

    Rater rows take their bias from the style table; consensus rows from
    ``biases`` (see :func:`scope_biases`). Consensus rows appear only for
    scopes with uncertainty or Dice results. The ratio is global-consensus
    uncertainty over the raters-average uncertainty (union aggregation).

    Args:
        style: Style table of the single raters
        uncertainty: Rows of an uncertainty CSV (scope label in ``rater_id``)
        dice_frame: Rows of a dice CSV
        biases: Optional scope label -> bias for consensus rows

    Returns:
        ComparisonTable with flags for missing rows and an undefined ratio
    """
    union, every, scores = _scope_means(uncertainty, dice_frame)
    biases = biases or {}
    flags: List[str] = []
    rows: List[ComparisonRow] = []

    for row in style.rows:
        label = row.rater_id
        if uncertainty is not None and label not in every:
            flags.append(f"missing_uncertainty:{label}")
        if dice_frame is not None and label not in scores:
            flags.append(f"missing_dice:{label}")
        rows.append(
            ComparisonRow(
                scope=ModelScopeKind.RATER,
                label=label,
                center_id=row.center_id,
                dice=scores.get(label),
                uncertainty=union.get(label),
                uncertainty_all=every.get(label),
                bias=row.bias,
            )
        )
    rater_rows = list(rows)

    known = {r.rater_id for r in style.rows}
    labels = sorted(set(union) | set(every) | set(scores))
    flags += [
        f"unknown_scope:{label}"
        for label in labels
        if _scope_kind(label) == ModelScopeKind.RATER and label not in known
    ]
    # Centers first, then global, matching the table layout.
    for kind in (ModelScopeKind.CENTER_CONSENSUS, ModelScopeKind.GLOBAL_CONSENSUS):
        for label in labels:
            if _scope_kind(label) != kind:
                continue
            rows.append(
                ComparisonRow(
                    scope=kind,
                    label=label,
                    center_id=label.split(":", 1)[1] if kind == ModelScopeKind.CENTER_CONSENSUS else None,
                    dice=scores.get(label),
                    uncertainty=union.get(label),
                    uncertainty_all=every.get(label),
                    bias=biases.get(label),
                )
            )

    average = None
    if len(rater_rows) >= 2:
        average = ComparisonRow(
            scope=ModelScopeKind.RATERS_AVERAGE,
            label="raters-average",
            dice=_mean_or_none([r.dice for r in rater_rows]),
            uncertainty=_mean_or_none([r.uncertainty for r in rater_rows]),
            uncertainty_all=_mean_or_none([r.uncertainty_all for r in rater_rows]),
            bias=_mean_or_none([r.bias for r in rater_rows]),
        )
        rows.append(average)

    ratio = None
    global_union = union.get("global")
    if average is None or average.uncertainty in (None, 0.0) or global_union is None:
        flags.append("consensus_ratio_undefined")
        logger.warning("Consensus uncertainty ratio undefined (needs a global row and at least two raters)")
    else:
        ratio = global_union / average.uncertainty
        logger.info(f"Global consensus uncertainty is {ratio:.3f} x the raters average")

    return ComparisonTable(rows=rows, consensus_ratio=ratio, flags=flags)


# Plot data and report
def _rows_of(table: ComparisonTable, kind: ModelScopeKind) -> List[ComparisonRow]:
    return [r for r in table.rows if r.scope == kind]


def build_plot_data(style: StyleTable, comparison: ComparisonTable) -> Dict[str, pd.DataFrame]:
    """
    The six plot-data frames, keyed by file name (see ``PLOT_FILES``).
    """
    raters = {r.label: r for r in _rows_of(comparison, ModelScopeKind.RATER)}
    centers = {r.center_id: r for r in _rows_of(comparison, ModelScopeKind.CENTER_CONSENSUS)}
    global_rows = _rows_of(comparison, ModelScopeKind.GLOBAL_CONSENSUS)
    global_row = global_rows[0] if global_rows else None

    style_points = pd.DataFrame(
        [
            {"rater_id": s.rater_id, "center_id": s.center_id, "bias": s.bias, "consistency": s.consistency}
            for s in style.rows
        ],
        columns=["rater_id", "center_id", "bias", "consistency"],
    )
    uncertainty_vs_bias = pd.DataFrame(
        [
            {
                "rater_id": s.rater_id,
                "center_id": s.center_id,
                "bias": s.bias,
                "relative_bias": s.relative_bias,
                "uncertainty": raters[s.rater_id].uncertainty if s.rater_id in raters else None,
                "uncertainty_all": raters[s.rater_id].uncertainty_all if s.rater_id in raters else None,
            }
            for s in style.rows
        ],
        columns=["rater_id", "center_id", "bias", "relative_bias", "uncertainty", "uncertainty_all"],
    )
    dice_vs_bias = pd.DataFrame(
        [
            {
                "rater_id": s.rater_id,
                "center_id": s.center_id,
                "bias": s.bias,
                "dice": raters[s.rater_id].dice if s.rater_id in raters else None,
            }
            for s in style.rows
        ],
        columns=["rater_id", "center_id", "bias", "dice"],
    )
    consensus_rows = _rows_of(comparison, ModelScopeKind.RATER) + _rows_of(comparison, ModelScopeKind.RATERS_AVERAGE)
    if global_row is not None:
        consensus_rows.append(global_row)
    consensus = pd.DataFrame(
        [
            {"label": r.label, "scope": r.scope.value, "uncertainty": r.uncertainty, "uncertainty_all": r.uncertainty_all}
            for r in consensus_rows
        ],
        columns=["label", "scope", "uncertainty", "uncertainty_all"],
    )

    center_records = []
    for center_id in sorted({s.center_id for s in style.rows}):
        members = [raters[s.rater_id] for s in style.rows if s.center_id == center_id and s.rater_id in raters]
        center_records.append(
            {
                "center_id": center_id,
                "n_raters": len(members),
                "raters_mean_uncertainty": _mean_or_none([m.uncertainty for m in members]),
                "center_consensus_uncertainty": centers[center_id].uncertainty if center_id in centers else None,
                "global_consensus_uncertainty": global_row.uncertainty if global_row is not None else None,
            }
        )
    per_center = pd.DataFrame(
        center_records,
        columns=[
            "center_id", "n_raters", "raters_mean_uncertainty",
            "center_consensus_uncertainty", "global_consensus_uncertainty",
        ],
    )
    dice_table = pd.DataFrame(
        [{"label": r.label, "scope": r.scope.value, "center_id": r.center_id, "dice": r.dice} for r in comparison.rows],
        columns=["label", "scope", "center_id", "dice"],
    )
    frames = (style_points, uncertainty_vs_bias, dice_vs_bias, consensus, per_center, dice_table)
    return dict(zip(PLOT_FILES, frames))


def _regression(name: str, x, y, flags: List[str]) -> Optional[Dict]:
    pairs = [(a, b) for a, b in zip(x, y) if a is not None and b is not None]
    if not pairs:
        # Input not supplied (e.g. no Dice table); nothing to flag.
        return None
    try:
        result = ols_r2([p[0] for p in pairs], [p[1] for p in pairs])
    except EvaluationError as e:
        flags.append(f"{name}_undefined: {e}")
        logger.warning(f"Regression {name} undefined: {e}")
        return None
    return result.model_dump()


def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite_or_none(v) for v in value]
    return value


def build_report(
    style: StyleTable,
    comparison: ComparisonTable,
    cluster: Optional[ClusterReport] = None,
    config: Optional[Dict] = None,
) -> Dict:
    """
    JSON-ready report: style rows, cluster report, comparison table and the
    rater-level regressions (uncertainty and Dice against bias, uncertainty
    against relative bias).
    """
    flags = list(comparison.flags)
    raters = {r.label: r for r in _rows_of(comparison, ModelScopeKind.RATER)}
    ordered = [(s, raters.get(s.rater_id)) for s in style.rows]
    bias_values = [s.bias for s, _ in ordered]
    relative = [s.relative_bias for s, _ in ordered]
    union = [r.uncertainty if r else None for _, r in ordered]
    every = [r.uncertainty_all if r else None for _, r in ordered]
    scores = [r.dice if r else None for _, r in ordered]

    regressions = {
        "uncertainty_vs_bias": _regression("uncertainty_vs_bias", bias_values, union, flags),
        "uncertainty_all_vs_bias": _regression("uncertainty_all_vs_bias", bias_values, every, flags),
        "uncertainty_vs_relative_bias": _regression("uncertainty_vs_relative_bias", relative, union, flags),
        "dice_vs_bias": _regression("dice_vs_bias", bias_values, scores, flags),
    }
    if cluster is not None:
        flags += cluster.flags

    report = {
        "entropy_unit": "nats",
        "consensus_method": style.consensus_method.value,
        "style": [row.model_dump() for row in style.rows],
        "cluster": cluster.model_dump(mode="json") if cluster is not None else None,
        "comparison": comparison.model_dump(mode="json"),
        "regressions": regressions,
        "flags": flags,
    }
    if config is not None:
        report["config"] = config
    return _finite_or_none(report)
