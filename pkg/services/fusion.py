"""
Label fusion for RaterLab: majority voting, center-weighted voting and STAPLE.
"""
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from config.settings import settings
from services.errors import FusionError, ManifestError
from services.models import (
    DatasetManifest,
    FusionMethod,
    FusionResult,
    StapleParams,
    Volume,
    VolumeKind,
)
from services.volume import require_same_geometry
from services.volume_io import load_entry_mask
from utils.logger import get_logger

logger = get_logger(__name__)

RaterFilter = Callable[[str, str], bool]


def _vote_matrix(masks: Sequence[Volume]) -> np.ndarray:
    """(n_voxels, n_raters) boolean decisions, voxels in x-fastest order."""
    for index, mask in enumerate(masks):
        if mask.kind != VolumeKind.MASK:
            raise FusionError(f"input {index} is not a binary mask")
    return np.stack([m.values.ravel(order="F") for m in masks], axis=1).astype(bool)


def _unflatten(flat: np.ndarray, masks: Sequence[Volume]) -> np.ndarray:
    return flat.reshape(masks[0].geometry.dims, order="F")


def majority_vote(masks: Sequence[Volume], rater_ids: Optional[List[str]] = None) -> FusionResult:
    """
    Voxelwise majority vote: positive iff at least half of the raters vote 1.

    Ties are positive (``2 * votes >= N``).

    Args:
        masks: Rater masks sharing one geometry
        rater_ids: Optional rater labels, in mask order

    Returns:
        FusionResult without posterior
    """
    if not masks:
        raise FusionError("majority vote needs at least one mask")
    geometry = require_same_geometry(masks)
    votes = np.zeros(geometry.dims, dtype=np.int64)
    for mask in masks:
        if mask.kind != VolumeKind.MASK:
            raise FusionError("majority vote needs binary masks")
        votes += mask.values
    consensus = Volume(geometry=geometry, kind=VolumeKind.MASK, values=2 * votes >= len(masks))
    return FusionResult(
        method=FusionMethod.MAJORITY,
        rater_ids=list(rater_ids or []),
        consensus=consensus,
    )


def center_weighted_vote(
    masks: Sequence[Volume],
    center_ids: Sequence[str],
    rater_ids: Optional[List[str]] = None,
) -> FusionResult:
    """
    Majority vote where each center carries the same total weight.

    A center's weight is split equally among its raters; a voxel is positive
    iff the weighted positive share is at least one half.

    Args:
        masks: Rater masks sharing one geometry
        center_ids: Center of each mask, in mask order
        rater_ids: Optional rater labels, in mask order

    Returns:
        FusionResult without posterior
    """
    if not masks:
        raise FusionError("center-weighted vote needs at least one mask")
    if len(center_ids) != len(masks):
        raise FusionError("one center id per mask is required")
    geometry = require_same_geometry(masks)

    per_center = {c: center_ids.count(c) for c in set(center_ids)}
    n_centers = len(per_center)
    # Integer arithmetic: share >= 1/2  <=>  2 * sum_c (votes_c * L / n_c) >= n_centers * L
    lcm = int(np.lcm.reduce(list(per_center.values())))
    score = np.zeros(geometry.dims, dtype=np.int64)
    for mask, center in zip(masks, center_ids):
        score += mask.values.astype(np.int64) * (lcm // per_center[center])
    consensus = Volume(geometry=geometry, kind=VolumeKind.MASK, values=2 * score >= n_centers * lcm)
    return FusionResult(
        method=FusionMethod.CENTER_WEIGHTED,
        rater_ids=list(rater_ids or []),
        consensus=consensus,
    )


def _e_step(
    decisions: np.ndarray,
    sensitivities: np.ndarray,
    specificities: np.ndarray,
    prior: np.ndarray,
    floor: float,
) -> np.ndarray:
    p = np.clip(sensitivities, floor, 1.0 - floor)
    q = np.clip(specificities, floor, 1.0 - floor)
    prior = np.clip(prior, floor, 1.0 - floor)

    log_a = np.log(prior) * np.ones(decisions.shape[0])
    log_b = np.log1p(-prior) * np.ones(decisions.shape[0])
    # Raters accumulate in a fixed order so every voxel sums identically.
    for j in range(decisions.shape[1]):
        voted = decisions[:, j]
        log_a = log_a + np.where(voted, np.log(p[j]), np.log1p(-p[j]))
        log_b = log_b + np.where(voted, np.log1p(-q[j]), np.log(q[j]))
    return expit(log_a - log_b)


def staple(
    masks: Sequence[Volume],
    init: Optional[StapleParams] = None,
    rater_ids: Optional[List[str]] = None,
) -> FusionResult:
    """
    Binary STAPLE: jointly estimate the hidden segmentation and each rater's
    sensitivity/specificity by expectation-maximization.

    E-step: ``W_i = a_i / (a_i + b_i)`` with
    ``a_i = prior_i * prod_j (p_j if d_ij else 1 - p_j)`` and
    ``b_i = (1 - prior_i) * prod_j (q_j if not d_ij else 1 - q_j)``, in log space.
    M-step: ``p_j = sum_{d_ij=1} W_i / sum W_i``,
    ``q_j = sum_{d_ij=0} (1 - W_i) / sum (1 - W_i)``.
    Stops when the largest parameter change drops below ``tol`` or after
    ``max_iters``. The consensus is ``posterior >= 0.5``.

    Args:
        masks: At least two rater masks sharing one geometry
        init: Initial parameters and EM controls (default: p = q = 0.99)
        rater_ids: Optional rater labels, in mask order

    Returns:
        FusionResult with posterior, final parameters and convergence status
    """
    if len(masks) < 2:
        raise FusionError(f"STAPLE needs at least 2 masks, got {len(masks)}")
    geometry = require_same_geometry(masks)
    decisions = _vote_matrix(masks)
    n_raters = decisions.shape[1]
    floor = settings.probability_floor

    params = init or StapleParams.initial(n_raters)
    if len(params.sensitivities) != n_raters:
        raise FusionError(f"initial parameters describe {len(params.sensitivities)} raters, got {n_raters} masks")

    if params.prior_map is not None:
        if params.prior_map.geometry != geometry:
            raise FusionError("prior map geometry differs from the masks")
        prior = params.prior_map.values.ravel(order="F").astype(np.float64)
    elif params.prior is not None:
        prior = np.float64(params.prior)
    else:
        prior = np.float64(decisions.mean())

    p = np.asarray(params.sensitivities, dtype=np.float64)
    q = np.asarray(params.specificities, dtype=np.float64)
    flags: List[str] = []

    unanimous = decisions.all(axis=1) | ~decisions.any(axis=1)
    if unanimous.all() and decisions.any() and not decisions.all():
        # Unanimous votes are an EM fixed point with perfect raters.
        posterior = decisions[:, 0].astype(np.float64)
        p = np.full(n_raters, 1.0 - floor)
        q = np.full(n_raters, 1.0 - floor)
        iterations, converged = 1, True
    else:
        posterior = np.zeros(decisions.shape[0])
        iterations, converged = 0, False
        for iterations in range(1, params.max_iters + 1):
            posterior = _e_step(decisions, p, q, prior, floor)
            weight_pos = posterior.sum()
            weight_neg = (1.0 - posterior).sum()
            if weight_pos <= 0.0 or weight_neg <= 0.0:
                flags.append("degenerate_m_step")
                logger.warning(
                    f"STAPLE M-step denominator vanished at iteration {iterations}; "
                    f"returning clamped parameters"
                )
                break
            new_p = (posterior @ decisions) / weight_pos
            new_q = ((1.0 - posterior) @ ~decisions) / weight_neg
            delta = max(np.abs(new_p - p).max(), np.abs(new_q - q).max())
            p, q = new_p, new_q
            if delta < params.tol:
                converged = True
                break
        if not converged and not flags:
            flags.append("max_iters_reached")
            logger.warning(f"STAPLE did not converge within {params.max_iters} iterations")

    final_params = StapleParams(
        sensitivities=np.clip(p, floor, 1.0 - floor).tolist(),
        specificities=np.clip(q, floor, 1.0 - floor).tolist(),
        prior=float(np.clip(prior, floor, 1.0 - floor)) if np.ndim(prior) == 0 else None,
        prior_map=params.prior_map,
        max_iters=params.max_iters,
        tol=params.tol,
    )
    posterior_grid = _unflatten(posterior, masks)
    logger.debug(f"STAPLE on {n_raters} raters: {iterations} iterations, converged={converged}")
    return FusionResult(
        method=FusionMethod.STAPLE,
        rater_ids=list(rater_ids or []),
        consensus=Volume(geometry=geometry, kind=VolumeKind.MASK, values=posterior_grid >= 0.5),
        posterior=Volume(
            geometry=geometry, kind=VolumeKind.PROBABILITY, values=np.clip(posterior_grid, 0.0, 1.0)
        ),
        final_params=final_params,
        iterations=iterations,
        converged=converged,
        flags=flags,
    )


def fuse_masks(
    masks: Sequence[Volume],
    method: FusionMethod,
    rater_ids: Optional[List[str]] = None,
    center_ids: Optional[Sequence[str]] = None,
    init: Optional[StapleParams] = None,
) -> FusionResult:
    """Dispatch to the fusion method."""
    if method == FusionMethod.MAJORITY:
        return majority_vote(masks, rater_ids)
    if method == FusionMethod.STAPLE:
        return staple(masks, init, rater_ids)
    if method == FusionMethod.CENTER_WEIGHTED:
        if center_ids is None:
            raise FusionError("center-weighted vote needs center ids")
        return center_weighted_vote(masks, center_ids, rater_ids)
    raise FusionError(f"unknown fusion method {method!r}")


def select_raters(manifest: DatasetManifest, subject_id: str, rater_filter: RaterFilter) -> List[str]:
    """Sorted rater ids of one subject accepted by ``rater_filter(rater_id, center_id)``."""
    subject = manifest.subject(subject_id)
    return sorted(e.rater_id for e in subject.entries if rater_filter(e.rater_id, e.center_id))


def fuse_subset(
    manifest: DatasetManifest,
    subject: str,
    rater_filter: RaterFilter,
    method: FusionMethod,
    init: Optional[StapleParams] = None,
) -> FusionResult:
    """
    Fuse the masks of the raters selected for one subject.

    Args:
        manifest: Dataset manifest
        subject: Subject id
        rater_filter: Predicate on (rater_id, center_id)
        method: Fusion method
        init: Optional STAPLE initialization

    Returns:
        FusionResult of the selected raters, in rater-id order
    """
    rater_ids = select_raters(manifest, subject, rater_filter)
    if not rater_ids:
        raise FusionError(f"rater filter selects nobody for subject {subject!r}")
    if method == FusionMethod.STAPLE and len(rater_ids) < 2:
        raise FusionError(f"STAPLE needs at least 2 raters, subject {subject!r} has {len(rater_ids)} selected")

    centers = manifest.rater_centers()
    try:
        masks = [load_entry_mask(manifest, subject, r) for r in rater_ids]
    except ManifestError as e:
        raise FusionError(str(e)) from e
    logger.debug(f"Fusing {len(masks)} raters for subject {subject} with {method.value}")
    return fuse_masks(
        masks, method, rater_ids=rater_ids, center_ids=[centers[r] for r in rater_ids], init=init
    )


def rater_filter_for(center_id: Optional[str] = None, rater_ids: Optional[Sequence[str]] = None) -> RaterFilter:
    """Build a rater filter from a center id and/or an explicit rater list (both optional)."""
    wanted = set(rater_ids) if rater_ids else None

    def accept(rater_id: str, rater_center: str) -> bool:
        if center_id is not None and rater_center != center_id:
            return False
        return wanted is None or rater_id in wanted

    return accept
