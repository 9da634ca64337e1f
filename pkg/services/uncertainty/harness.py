"""
Monte-Carlo test-time augmentation harness.

Each draw samples a transform, warps the input plane, runs the predictor and
warps the prediction back. Voxelwise entropy of the binarized draws (in
nats) is the uncertainty; it is summarized per image over the union of
positive draws and over all voxels.
"""
import math
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import entr

from config.settings import settings
from services.errors import MissingPredictionError, PredictorError, RaterLabError, UncertaintyError
from services.models import (
    DatasetManifest,
    Interpolation,
    McStack,
    ModelScope,
    RaterModel,
    TtaRanges,
    UncertaintyReport,
    Volume,
    VolumeKind,
)
from services.uncertainty.predictors import Predictor, check_prediction, predictor_for_scope
from services.uncertainty.transforms import apply_transform, sample_transform
from services.volume import slices, stack_slices
from services.volume_io import load_volume, save_volume
from utils.logger import get_logger

logger = get_logger(__name__)

UNCERTAINTY_COLUMNS = ["rater_id", "image_id", "mean_entropy_union", "mean_entropy_all", "n_samples", "seed"]

MAX_ENTROPY = math.log(2.0)


def _draw(
    plane: np.ndarray,
    predictor: Predictor,
    ranges: TtaRanges,
    seed_seq: np.random.SeedSequence,
    index: int,
):
    t = sample_transform(ranges, seed_seq)
    warped = apply_transform(plane, t, Interpolation.BILINEAR)
    try:
        prediction = check_prediction(predictor(warped), warped)
    except MissingPredictionError as e:
        return None, t, e
    except PredictorError as e:
        raise PredictorError(str(e), sample_index=index) from e
    except Exception as e:
        raise PredictorError(f"{type(e).__name__}: {e}", sample_index=index) from e
    restored = apply_transform(prediction, t.inverse(), Interpolation.BILINEAR)
    return np.clip(restored, 0.0, 1.0), t, None


def _merge_missing(errors: Sequence[MissingPredictionError]) -> MissingPredictionError:
    directories = {e.directory for e in errors}
    directory = directories.pop() if len(directories) == 1 else None
    return MissingPredictionError([key for e in errors for key in e.keys], directory)


def mc_predict(
    plane: np.ndarray,
    predictor: Predictor,
    n: int,
    ranges: TtaRanges,
    seed: int,
    threads: int = 1,
    stream: Sequence[int] = (),
) -> McStack:
    """
    Collect ``n`` test-time augmentation predictions of one plane.

    Every draw has its own random stream, spawned from ``seed`` and
    ``stream`` (e.g. image and plane index), so the stack does not depend on
    how draws are scheduled across threads.

    Args:
        plane: 2D input plane
        predictor: Plane -> probability map
        n: Number of draws (>= 2)
        ranges: Transform sampling ranges
        seed: Root seed
        threads: Worker threads over draws
        stream: Extra spawn key identifying the plane

    Returns:
        McStack in draw order

    Raises:
        MissingPredictionError: precomputed predictions are missing; raised after
            every draw ran, listing all exported inputs
        PredictorError: the predictor failed; the message names the draw index
    """
    if n < 2:
        raise UncertaintyError(f"Monte-Carlo estimation needs n >= 2, got {n}")
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise UncertaintyError(f"expected a nonempty 2D plane, got shape {plane.shape}")

    seed_seqs = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream)).spawn(n)
    draws = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_draw)(plane, predictor, ranges, seed_seqs[i], i) for i in range(n)
    )
    missing = [d[2] for d in draws if d[2] is not None]
    if missing:
        raise _merge_missing(missing)
    return McStack(samples=[d[0] for d in draws], transforms=[d[1] for d in draws])


def _binarized(stack: McStack, threshold: Optional[float]) -> np.ndarray:
    level = settings.entropy_threshold if threshold is None else threshold
    return stack.as_array() >= level


def entropy_map(stack: McStack, binarize_threshold: Optional[float] = None) -> np.ndarray:
    """
    Voxelwise binary entropy (nats) of the fraction of draws at or above the threshold.

    ``H = -f ln f - (1 - f) ln(1 - f)`` with ``H(0) = H(1) = 0``.
    """
    if stack.n_samples < 2:
        raise UncertaintyError("entropy needs at least 2 samples")
    f = _binarized(stack, binarize_threshold).mean(axis=0)
    return np.clip(entr(f) + entr(1.0 - f), 0.0, MAX_ENTROPY)


def union_mask(stack: McStack, binarize_threshold: Optional[float] = None) -> np.ndarray:
    """Voxels positive in at least one binarized draw."""
    return _binarized(stack, binarize_threshold).any(axis=0)


def summarize(
    maps: Sequence[np.ndarray],
    union_masks: Sequence[np.ndarray],
    n_samples: Optional[int] = None,
    seed: Optional[int] = None,
) -> UncertaintyReport:
    """
    Reduce per-image entropy maps to scalars.

    The union scalar averages entropy over each image's union voxels, then
    over images; images with an empty union are skipped and counted. The
    all-voxel scalar averages over every voxel of each image, then over images.

    Args:
        maps: Per-image entropy maps (any dimensionality)
        union_masks: Matching union-of-positive-draws masks
        n_samples: Draws per plane, echoed into the report
        seed: Root seed, echoed into the report

    Returns:
        UncertaintyReport
    """
    if not maps:
        raise UncertaintyError("no entropy maps to summarize")
    if len(maps) != len(union_masks):
        raise UncertaintyError("one union mask per entropy map is required")

    per_image_union: List[Optional[float]] = []
    per_image_all: List[float] = []
    for entropy, union in zip(maps, union_masks):
        entropy = np.asarray(entropy, dtype=np.float64)
        union = np.asarray(union, dtype=bool)
        if entropy.shape != union.shape:
            raise UncertaintyError(f"entropy map {entropy.shape} and union mask {union.shape} differ in shape")
        per_image_all.append(float(entropy.mean()))
        per_image_union.append(float(entropy[union].mean()) if union.any() else None)

    defined = [u for u in per_image_union if u is not None]
    skipped = len(per_image_union) - len(defined)
    flags = []
    if not defined:
        flags.append("union_empty")
        logger.warning("No union voxels in any image; union entropy undefined")
    elif skipped:
        logger.debug(f"{skipped} image(s) without union voxels skipped")

    return UncertaintyReport(
        entropy_maps=[np.asarray(m) for m in maps],
        per_image_union=per_image_union,
        per_image_all=per_image_all,
        mean_entropy_union=float(np.mean(defined)) if defined else None,
        mean_entropy_all=float(np.mean(per_image_all)),
        n_samples=n_samples,
        seed=seed,
        skipped_images=skipped,
        flags=flags,
    )


def volume_uncertainty(
    intensity: Volume,
    predictor: Predictor,
    n: int,
    ranges: TtaRanges,
    seed: int,
    threads: int = 1,
    image_index: int = 0,
) -> Tuple[Volume, Volume]:
    """
    Slice-wise harness over a whole volume.

    Plane ``k`` of image ``image_index`` draws from stream ``(image_index, k)``.

    Returns:
        (entropy map, union mask) volumes on the input geometry
    """
    entropies, unions, missing = [], [], []
    for k, plane in enumerate(slices(intensity)):
        try:
            stack = mc_predict(plane, predictor, n, ranges, seed, threads=threads, stream=(image_index, k))
        except MissingPredictionError as e:
            missing.append(e)
            continue
        entropies.append(entropy_map(stack))
        unions.append(union_mask(stack))
    if missing:
        raise _merge_missing(missing)
    return (
        stack_slices(entropies, intensity.geometry, VolumeKind.IMAGE),
        stack_slices(unions, intensity.geometry, VolumeKind.MASK),
    )


def predict_volume(intensity: Volume, predictor: Predictor, level: Optional[float] = None) -> Volume:
    """Plain (unaugmented) slice-wise prediction, binarized."""
    level = settings.fusion_threshold if level is None else level
    planes, missing = [], []
    for k, plane in enumerate(slices(intensity)):
        plane = np.asarray(plane, dtype=np.float64)
        try:
            prediction = check_prediction(predictor(plane), plane)
        except MissingPredictionError as e:
            missing.append(e)
            continue
        except RaterLabError:
            raise
        except Exception as e:
            raise PredictorError(f"plane {k}: {type(e).__name__}: {e}") from e
        planes.append(prediction >= level)
    if missing:
        raise _merge_missing(missing)
    return stack_slices(planes, intensity.geometry, VolumeKind.MASK)


def load_intensity(manifest: DatasetManifest, subject_id: str) -> Volume:
    """Intensity volume of a subject (its ``image_path``)."""
    subject = manifest.subject(subject_id)
    if subject.image_path is None:
        raise UncertaintyError(f"subject {subject_id!r} has no image_path; the harness needs intensity input")
    return load_volume(manifest.resolve(subject.image_path))


def _map_path(maps_dir: Path, scope_label: str, subject_id: str) -> Path:
    return maps_dir / re.sub(r"[^A-Za-z0-9_.-]+", "_", scope_label) / f"{subject_id}_entropy.rvol"


def scope_uncertainty(
    manifest: DatasetManifest,
    scope: ModelScope,
    predictor: Predictor,
    n: int,
    ranges: TtaRanges,
    seed: int,
    threads: int = 1,
    maps_dir: Optional[Path] = None,
    metadata: Optional[Dict] = None,
) -> Tuple[UncertaintyReport, pd.DataFrame]:
    """
    Run the harness for one model over every subject of the manifest.

    Subject ``i`` uses stream ``(i, k)`` for plane ``k``, so every scope sees
    the same augmentations.

    Returns:
        (report over subjects, per-image rows with ``UNCERTAINTY_COLUMNS``)
    """
    maps, unions, missing = [], [], []
    for index, subject_id in enumerate(manifest.subject_ids):
        intensity = load_intensity(manifest, subject_id)
        try:
            entropy, union = volume_uncertainty(
                intensity, predictor, n, ranges, seed, threads=threads, image_index=index
            )
        except MissingPredictionError as e:
            missing.append(e)
            continue
        if maps_dir is not None:
            save_volume(entropy, _map_path(Path(maps_dir), scope.label, subject_id), metadata=metadata)
        maps.append(entropy.values)
        unions.append(union.values.astype(bool))
    if missing:
        raise _merge_missing(missing)

    report = summarize(maps, unions, n_samples=n, seed=seed)
    frame = pd.DataFrame(
        {
            "rater_id": scope.label,
            "image_id": manifest.subject_ids,
            "mean_entropy_union": [np.nan if u is None else u for u in report.per_image_union],
            "mean_entropy_all": report.per_image_all,
            "n_samples": n,
            "seed": seed,
        },
        columns=UNCERTAINTY_COLUMNS,
    )
    logger.info(
        f"Uncertainty for {scope.label}: union {report.mean_entropy_union}, all {report.mean_entropy_all:.6f}"
    )
    return report, frame


def run_uncertainty(
    manifest: DatasetManifest,
    predictor_spec: str,
    scopes: Sequence[ModelScope],
    n: int,
    ranges: TtaRanges,
    seed: int,
    threads: int = 1,
    rater_models: Optional[Dict[str, RaterModel]] = None,
    maps_dir: Optional[Union[str, Path]] = None,
    metadata: Optional[Dict] = None,
    progress: Optional[Callable[[ModelScope], None]] = None,
) -> Tuple[Dict[str, UncertaintyReport], pd.DataFrame]:
    """
    Harness over every model scope; one predictor is built per scope.

    Returns:
        (scope label -> report, concatenated per-image rows)
    """
    if not scopes:
        raise UncertaintyError("no model scopes to evaluate")
    reports: Dict[str, UncertaintyReport] = {}
    frames, missing = [], []
    for scope in scopes:
        if progress is not None:
            progress(scope)
        predictor = predictor_for_scope(predictor_spec, scope, rater_models)
        try:
            report, frame = scope_uncertainty(
                manifest, scope, predictor, n, ranges, seed,
                threads=threads,
                maps_dir=Path(maps_dir) if maps_dir is not None else None,
                metadata=metadata,
            )
        except MissingPredictionError as e:
            logger.warning(f"{scope.label}: {len(e.keys)} input(s) exported to {e.directory}")
            missing.append(e)
            continue
        reports[scope.label] = report
        frames.append(frame)
    if missing:
        raise _merge_missing(missing)
    return reports, pd.concat(frames, ignore_index=True)
