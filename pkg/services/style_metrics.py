"""
Rater style metrics for RaterLab.

A rater's style is measured against a consensus from per-image differences in
positive voxel count: bias is their mean, consistency their population
standard deviation. Relative variants divide each difference by the
consensus count first. ASSD complements the volume view with a boundary
distance.
"""
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from scipy.spatial.distance import cdist

from config.settings import settings
from services.errors import GeometryMismatchError, ManifestError, MetricError
from services.fusion import fuse_masks
from services.models import (
    ConsensusScope,
    DatasetManifest,
    FusionMethod,
    RaterStyle,
    StyleTable,
    Volume,
    VolumeKind,
)
from services.volume import positive_count
from services.volume_io import load_entry_mask
from utils.atomic import meta_path, write_csv, write_json
from utils.logger import get_logger

logger = get_logger(__name__)

STYLE_COLUMNS = [
    "rater_id", "center_id", "n_images", "bias", "consistency",
    "relative_bias", "relative_consistency", "skipped_images",
]

# Sidecar entry holding the consensus description of a style table.
STYLE_META_KEY = "style"

MaskLike = Union[Volume, np.ndarray]


def _count(mask: MaskLike) -> int:
    if isinstance(mask, Volume):
        return positive_count(mask)
    return int(np.count_nonzero(mask))


def _shape(mask: MaskLike) -> Tuple:
    return mask.geometry.dims if isinstance(mask, Volume) else np.shape(mask)


def count_differences(rater_masks: Sequence[MaskLike], consensus_masks: Sequence[MaskLike]) -> List[Tuple[int, int]]:
    """
    Per-image (n_rater, n_consensus) positive counts.

    Args:
        rater_masks: One mask per image
        consensus_masks: Matching consensus masks

    Returns:
        List of (n_rater, n_consensus)
    """
    if not rater_masks:
        raise MetricError("style metrics need at least one image")
    if len(rater_masks) != len(consensus_masks):
        raise MetricError(f"{len(rater_masks)} rater masks but {len(consensus_masks)} consensus masks")
    counts = []
    for index, (rater, consensus) in enumerate(zip(rater_masks, consensus_masks)):
        if isinstance(rater, Volume) and isinstance(consensus, Volume):
            if rater.geometry != consensus.geometry:
                raise GeometryMismatchError(f"image {index}: rater and consensus geometries differ")
        elif _shape(rater) != _shape(consensus):
            raise GeometryMismatchError(f"image {index}: rater and consensus shapes differ")
        counts.append((_count(rater), _count(consensus)))
    return counts


def _differences(rater_masks, consensus_masks) -> np.ndarray:
    return np.array([r - c for r, c in count_differences(rater_masks, consensus_masks)], dtype=np.float64)


def bias(rater_masks: Sequence[MaskLike], consensus_masks: Sequence[MaskLike]) -> float:
    """Mean signed difference in positive voxels, rater minus consensus."""
    return float(np.mean(_differences(rater_masks, consensus_masks)))


def consistency(rater_masks: Sequence[MaskLike], consensus_masks: Sequence[MaskLike]) -> float:
    """Population standard deviation of the per-image differences."""
    return float(np.std(_differences(rater_masks, consensus_masks), ddof=0))


def relative_differences(
    rater_masks: Sequence[MaskLike], consensus_masks: Sequence[MaskLike]
) -> Tuple[np.ndarray, int]:
    """
    Per-image ``(n_rater - n_consensus) / n_consensus``.

    Images with an empty consensus are undefined and skipped.

    Returns:
        Tuple of (relative differences, number of skipped images)
    """
    counts = count_differences(rater_masks, consensus_masks)
    kept = [(r - c) / c for r, c in counts if c > 0]
    return np.array(kept, dtype=np.float64), len(counts) - len(kept)


def relative_bias(rater_masks: Sequence[MaskLike], consensus_masks: Sequence[MaskLike]) -> Optional[float]:
    """Mean relative difference; None when every consensus is empty."""
    diffs, skipped = relative_differences(rater_masks, consensus_masks)
    if skipped:
        logger.warning(f"relative bias skipped {skipped} image(s) with empty consensus")
    if diffs.size == 0:
        return None
    return float(np.mean(diffs))


def relative_consistency(rater_masks: Sequence[MaskLike], consensus_masks: Sequence[MaskLike]) -> Optional[float]:
    """Population standard deviation of the relative differences; None when undefined."""
    diffs, _ = relative_differences(rater_masks, consensus_masks)
    if diffs.size == 0:
        return None
    return float(np.std(diffs, ddof=0))


_FACES = generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Positive voxels with at least one non-positive face neighbor (outside the grid counts as non-positive)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_FACES, border_value=0)


def _directed_mean(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> float:
    src_idx = np.argwhere(src)
    dst_idx = np.argwhere(dst)
    if src_idx.shape[0] * dst_idx.shape[0] <= settings.assd_bruteforce_max_pairs:
        distances = cdist(src_idx * spacing, dst_idx * spacing).min(axis=1)
    else:
        field = distance_transform_edt(~dst, sampling=spacing)
        distances = field[tuple(src_idx.T)]
    return float(distances.mean())


def assd(a: Volume, b: Volume) -> Optional[float]:
    """
    Average symmetric surface distance in mm.

    Mean distance from each boundary voxel of ``a`` to the nearest boundary
    voxel of ``b``, averaged with the reverse direction.

    Args:
        a: Binary mask
        b: Binary mask on the same geometry

    Returns:
        ASSD in mm, or None if either mask is empty
    """
    if a.geometry != b.geometry:
        raise GeometryMismatchError("ASSD needs masks on the same geometry")
    if a.kind != VolumeKind.MASK or b.kind != VolumeKind.MASK:
        raise MetricError("ASSD needs binary masks")
    ba, bb = boundary(a.values), boundary(b.values)
    if not ba.any() or not bb.any():
        logger.warning("ASSD undefined for an empty mask")
        return None
    spacing = np.asarray(a.geometry.spacing, dtype=np.float64)
    return 0.5 * (_directed_mean(ba, bb, spacing) + _directed_mean(bb, ba, spacing))


def _split_images(volumes: Sequence[Volume], slice_wise: bool) -> List[MaskLike]:
    if not slice_wise:
        return list(volumes)
    return [v.values[:, :, k] for v in volumes for k in range(v.geometry.dims[2])]


def rater_style(
    rater_id: str,
    center_id: str,
    rater_masks: Sequence[Volume],
    consensus_masks: Sequence[Volume],
    slice_wise: bool = False,
    with_assd: bool = False,
) -> RaterStyle:
    """All style metrics of one rater."""
    rater_images = _split_images(rater_masks, slice_wise)
    consensus_images = _split_images(consensus_masks, slice_wise)
    diffs, skipped = relative_differences(rater_images, consensus_images)
    mean_assd = None
    if with_assd:
        values = [assd(r, c) for r, c in zip(rater_masks, consensus_masks)]
        values = [v for v in values if v is not None]
        mean_assd = float(np.mean(values)) if values else None
    return RaterStyle(
        rater_id=rater_id,
        center_id=center_id,
        n_images=len(rater_images),
        bias=bias(rater_images, consensus_images),
        consistency=consistency(rater_images, consensus_images),
        relative_bias=float(np.mean(diffs)) if diffs.size else None,
        relative_consistency=float(np.std(diffs, ddof=0)) if diffs.size else None,
        skipped_images=skipped,
        mean_assd=mean_assd,
    )


def subject_consensus(
    manifest: DatasetManifest,
    subject_id: str,
    rater_ids: Sequence[str],
    method: FusionMethod,
) -> Tuple[Dict[str, Volume], Optional[Volume]]:
    """Load the scoped raters' masks of one subject and fuse them."""
    subject = manifest.subject(subject_id)
    present = [r for r in rater_ids if subject.entry(r) is not None]
    if not present:
        return {}, None
    masks = {r: load_entry_mask(manifest, subject_id, r) for r in present}
    centers = manifest.rater_centers()
    result = fuse_masks(
        [masks[r] for r in present], method, rater_ids=present, center_ids=[centers[r] for r in present]
    )
    return masks, result.consensus


def style_table(
    manifest: DatasetManifest,
    consensus_method: FusionMethod = FusionMethod.MAJORITY,
    consensus_scope: Optional[ConsensusScope] = None,
    slice_wise: bool = False,
    with_assd: bool = False,
    threads: int = 1,
) -> StyleTable:
    """
    Style of every rater in scope against the scope's per-subject consensus.

    The consensus includes the rater being measured. Each subject's consensus
    is computed once.

    Args:
        manifest: Dataset manifest
        consensus_method: Fusion method for the consensus
        consensus_scope: Raters fused into the consensus (default: all)
        slice_wise: Treat every axial slice as an image
        with_assd: Also compute the mean ASSD per rater
        threads: Parallel workers over subjects

    Returns:
        StyleTable sorted by rater id
    """
    scope = consensus_scope or ConsensusScope()
    rater_ids = scope.select(manifest)
    centers = manifest.rater_centers()

    per_subject = Parallel(n_jobs=threads, prefer="threads")(
        delayed(subject_consensus)(manifest, sid, rater_ids, consensus_method)
        for sid in manifest.subject_ids
    )

    rows = []
    for rater_id in rater_ids:
        rater_masks, consensus_masks = [], []
        for masks, consensus in per_subject:
            if rater_id in masks:
                rater_masks.append(masks[rater_id])
                consensus_masks.append(consensus)
        if not rater_masks:
            raise ManifestError(f"rater {rater_id!r} has no annotations")
        row = rater_style(rater_id, centers[rater_id], rater_masks, consensus_masks, slice_wise, with_assd)
        if row.skipped_images:
            logger.warning(f"rater {rater_id}: {row.skipped_images} image(s) skipped for relative metrics")
        rows.append(row)

    logger.info(
        f"Style table: {len(rows)} raters, {consensus_method.value} consensus, scope {scope.label}"
    )
    return StyleTable(
        rows=rows, consensus_method=consensus_method, consensus_scope=scope, slice_wise=slice_wise
    )


def compare_style_tables(reference: StyleTable, other: StyleTable) -> Dict:
    """
    Per-rater bias offsets ``other - reference`` and their mean and spread.

    Typical use: STAPLE versus majority consensus, where the offset tends to
    be similar for every rater.
    """
    shared = sorted({r.rater_id for r in reference.rows} & {r.rater_id for r in other.rows})
    if not shared:
        raise MetricError("style tables share no raters")
    offsets = {r: other.row(r).bias - reference.row(r).bias for r in shared}
    values = np.array(list(offsets.values()))
    report = {
        "reference": reference.consensus_method.value,
        "other": other.consensus_method.value,
        "bias_offsets": offsets,
        "mean_offset": float(values.mean()),
        "offset_spread": float(values.std(ddof=0)),
    }
    logger.info(
        f"{other.consensus_method.value} vs {reference.consensus_method.value}: "
        f"mean bias offset {report['mean_offset']:.3f}, spread {report['offset_spread']:.3f}"
    )
    return report


def style_frame(table: StyleTable, with_assd: bool = False) -> pd.DataFrame:
    """StyleTable as a DataFrame with the CSV column order."""
    columns = STYLE_COLUMNS + (["mean_assd"] if with_assd else [])
    records = [row.model_dump() for row in table.rows]
    return pd.DataFrame.from_records(records, columns=columns)


def style_metadata(table: StyleTable) -> Dict:
    """Consensus description of a table, stored under ``style`` in its CSV sidecar."""
    return {
        "consensus_method": table.consensus_method.value,
        "consensus_scope": table.consensus_scope.model_dump(mode="json"),
        "slice_wise": table.slice_wise,
    }


def write_style_csv(table: StyleTable, path: Union[str, Path], with_assd: bool = False) -> Path:
    """Write a StyleTable as CSV plus its metadata sidecar, atomically."""
    write_csv(path, style_frame(table, with_assd))
    write_json(meta_path(path), {STYLE_META_KEY: style_metadata(table)})
    return Path(path)


def _read_style_metadata(path: Union[str, Path]) -> Dict:
    sidecar = meta_path(path)
    if not sidecar.is_file():
        return {}
    try:
        return dict(json.loads(sidecar.read_text(encoding="utf-8")).get(STYLE_META_KEY) or {})
    except (OSError, ValueError, AttributeError) as e:
        raise MetricError(f"{sidecar}: unreadable style metadata ({e})") from e


def read_style_csv(path: Union[str, Path]) -> StyleTable:
    """
    Read a style CSV back into a StyleTable.

    Consensus method, scope and the slice-wise flag come from the ``style``
    entry of the ``<file>.meta.json`` sidecar; without one they keep their
    defaults (majority vote over every rater, whole volumes).
    """
    frame = pd.read_csv(path, dtype={"rater_id": str, "center_id": str})
    missing = [c for c in STYLE_COLUMNS if c not in frame.columns]
    if missing:
        raise MetricError(f"{path}: style CSV lacks columns {missing}")
    frame = frame.astype(object).where(pd.notna(frame), None)
    rows = [RaterStyle.model_validate(record) for record in frame.to_dict(orient="records")]
    try:
        return StyleTable.model_validate({**_read_style_metadata(path), "rows": rows})
    except ValueError as e:
        raise MetricError(f"{path}: invalid style metadata ({e})") from e
