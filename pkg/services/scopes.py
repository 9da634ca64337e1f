"""
Model scopes: the ground-truth source a model stands for.

A scope is a single rater (label ``<rater_id>``), a center consensus
(``center:<id>``) or the global consensus (``global``). Models are
evaluated against the ground truth of their own scope.
"""
from typing import List, Optional

from services.errors import ManifestError
from services.models import (
    DatasetManifest,
    FusionMethod,
    ModelScope,
    ModelScopeKind,
    Volume,
)
from services.style_metrics import subject_consensus
from utils.logger import get_logger

logger = get_logger(__name__)

SCOPE_SETS = ("raters", "centers", "global", "all")


def model_scopes(manifest: DatasetManifest, which: str = "all") -> List[ModelScope]:
    """
    Enumerate model scopes of a manifest.

    Args:
        manifest: Dataset manifest
        which: ``raters``, ``centers``, ``global`` or ``all``

    Returns:
        Scopes ordered raters, centers, global (each sorted by id)
    """
    if which not in SCOPE_SETS:
        raise ValueError(f"unknown scope set {which!r}; expected one of {SCOPE_SETS}")
    rater_centers = manifest.rater_centers()
    scopes: List[ModelScope] = []
    if which in ("raters", "all"):
        scopes += [
            ModelScope(label=r, kind=ModelScopeKind.RATER, center_id=c, rater_ids=[r])
            for r, c in rater_centers.items()
        ]
    if which in ("centers", "all"):
        scopes += [
            ModelScope(
                label=f"center:{c}", kind=ModelScopeKind.CENTER_CONSENSUS, center_id=c, rater_ids=raters
            )
            for c, raters in manifest.centers().items()
        ]
    if which in ("global", "all"):
        scopes.append(
            ModelScope(label="global", kind=ModelScopeKind.GLOBAL_CONSENSUS, rater_ids=list(rater_centers))
        )
    return scopes


def scope_from_label(manifest: DatasetManifest, label: str) -> ModelScope:
    """Look up a scope by its label."""
    for scope in model_scopes(manifest):
        if scope.label == label:
            return scope
    raise ManifestError(f"unknown model scope {label!r}")


def scope_ground_truth(
    manifest: DatasetManifest,
    subject_id: str,
    scope: ModelScope,
    method: FusionMethod = FusionMethod.MAJORITY,
) -> Optional[Volume]:
    """
    Ground truth of a scope for one subject.

    A rater scope uses the rater's mask; consensus scopes fuse the members
    that annotated the subject (a single present member is used as is).

    Returns:
        Binary mask, or None when no member annotated the subject
    """
    present = [r for r in scope.rater_ids if manifest.subject(subject_id).entry(r) is not None]
    if not present:
        return None
    if method == FusionMethod.STAPLE and len(present) < 2:
        method = FusionMethod.MAJORITY
    _, consensus = subject_consensus(manifest, subject_id, present, method)
    return consensus
