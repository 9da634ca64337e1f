"""
Synthetic cohorts for RaterLab.

Phantoms are unions of random ellipsoids with a noisy intensity volume.
Parametric raters over- or under-segment a phantom by a signed number of
6-connectivity dilations/erosions, with per-image jitter and random flips of
boundary voxels. Synthetic predictors stand in for trained models: they
threshold the intensity plane, optionally morph it, smooth it and add noise
in the boundary band.
"""
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.ndimage import binary_dilation, binary_erosion, gaussian_filter, generate_binary_structure

from config.settings import settings
from services.errors import SimulationError
from services.models import (
    DatasetManifest,
    Ellipsoid,
    Geometry,
    ManifestEntry,
    Phantom,
    RaterModel,
    SubjectRecord,
    Volume,
    VolumeKind,
)
from services.volume_io import save_manifest, save_volume
from utils.atomic import write_json
from utils.logger import get_logger

logger = get_logger(__name__)

SeedLike = Union[int, Sequence[int]]

_FACES_3D = generate_binary_structure(3, 1)
_FACES_2D = generate_binary_structure(2, 1)


# Phantoms
def _voxelize(ellipsoid: Ellipsoid, geometry: Geometry) -> np.ndarray:
    # Voxel radii; a voxel belongs to the object iff its center lies inside.
    radii = np.maximum(np.asarray(ellipsoid.radii) / np.asarray(geometry.spacing), 1e-9)
    grids = np.ogrid[tuple(slice(0, d) for d in geometry.dims)]
    distance = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, ellipsoid.center, radii))
    return distance <= 1.0


def _place(
    rng: np.random.Generator,
    geometry: Geometry,
    size_range: Tuple[float, float],
) -> Ellipsoid:
    dims = np.asarray(geometry.dims)
    spacing = np.asarray(geometry.spacing)
    radii_mm = rng.uniform(size_range[0], size_range[1], size=3)
    # Clamp so the object fits inside the grid around an integer center.
    radii_vox = np.minimum(radii_mm / spacing, np.floor((dims - 1) / 2.0))
    reach = np.ceil(radii_vox).astype(int)
    center = [int(rng.integers(reach[a], dims[a] - reach[a])) for a in range(3)]
    return Ellipsoid(center=tuple(center), radii=tuple(float(r) for r in radii_vox * spacing))


def generate_phantom(
    geometry: Geometry,
    n_objects: int,
    size_range: Tuple[float, float],
    seed: SeedLike,
    noise_sigma: float = 0.1,
) -> Phantom:
    """
    Random phantom of non-overlapping ellipsoids.

    Radii are drawn in mm from ``size_range`` and clamped to the grid; each
    object is retried up to ``settings.phantom_max_retries`` times until it
    overlaps no earlier object.

    Args:
        geometry: Voxel grid
        n_objects: Number of ellipsoids (>= 1)
        size_range: (min, max) radius in mm
        seed: Seed or seed sequence entropy
        noise_sigma: Gaussian noise added to the unit-intensity object

    Returns:
        Phantom with a nonempty true mask

    Raises:
        SimulationError: no objects requested, bad size range or placement failure
    """
    if n_objects < 1:
        raise SimulationError("a phantom needs at least one object")
    lo, hi = size_range
    if not 0.0 < lo <= hi:
        raise SimulationError(f"invalid size range {size_range}")

    rng = np.random.default_rng(seed)
    mask = np.zeros(geometry.dims, dtype=bool)
    ellipsoids: List[Ellipsoid] = []
    for index in range(n_objects):
        for _ in range(settings.phantom_max_retries):
            ellipsoid = _place(rng, geometry, (lo, hi))
            voxels = _voxelize(ellipsoid, geometry)
            if not (voxels & mask).any():
                break
        else:
            raise SimulationError(
                f"could not place object {index + 1} of {n_objects} "
                f"after {settings.phantom_max_retries} attempts"
            )
        mask |= voxels
        ellipsoids.append(ellipsoid)

    intensity = mask.astype(np.float64) + rng.normal(0.0, noise_sigma, size=geometry.dims)
    return Phantom(
        geometry=geometry,
        true_mask=Volume(geometry=geometry, kind=VolumeKind.MASK, values=mask),
        intensity=Volume(geometry=geometry, kind=VolumeKind.IMAGE, values=intensity),
        ellipsoids=ellipsoids,
    )


# Raters
def morph(mask: np.ndarray, steps: int, structure: np.ndarray) -> np.ndarray:
    """
    Signed morphology: ``steps`` dilations (positive) or erosions (negative).

    Erosion stops before a step would empty the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if steps > 0:
        return binary_dilation(mask, structure=structure, iterations=steps)
    for _ in range(-steps):
        eroded = binary_erosion(mask, structure=structure)
        if not eroded.any():
            break
        mask = eroded
    return mask


def boundary_band(mask: np.ndarray, structure: np.ndarray) -> np.ndarray:
    """Inner plus outer boundary voxels."""
    mask = np.asarray(mask, dtype=bool)
    inner = mask & ~binary_erosion(mask, structure=structure)
    outer = binary_dilation(mask, structure=structure) & ~mask
    return inner | outer


def simulate_rater(phantom: Phantom, model: RaterModel, seed: SeedLike) -> Volume:
    """
    One rater's annotation of a phantom.

    Iterations are ``round(Normal(center_style + rater_offset, jitter_sigma))``
    (halves round up); each boundary voxel then flips with ``flip_rate``.
    Flips that would empty the mask are discarded.

    Args:
        phantom: Synthetic subject
        model: Rater parameters
        seed: Seed or seed sequence entropy

    Returns:
        Binary mask on the phantom geometry
    """
    rng = np.random.default_rng(seed)
    iterations = int(np.floor(rng.normal(model.mean_iterations, model.jitter_sigma) + 0.5))
    mask = morph(phantom.true_mask.as_bool(), iterations, _FACES_3D)

    if model.flip_rate > 0.0:
        band = boundary_band(mask, _FACES_3D)
        flips = band & (rng.random(mask.shape) < model.flip_rate)
        flipped = mask ^ flips
        if flipped.any():
            mask = flipped
    return Volume(geometry=phantom.geometry, kind=VolumeKind.MASK, values=mask)


# Synthetic predictors
class SyntheticPredictorParams(BaseModel):
    """Parameters shared by the synthetic predictor family."""
    threshold: float = 0.5
    smooth: float = Field(default=1.0, ge=0.0)
    sigma: float = Field(default=0.2, ge=0.0)
    b: int = 0
    sigma_base: float = 0.16
    sigma_gain: float = 0.04
    signed_sigma: bool = True
    seed: int = 0


class SyntheticPredictor:
    """
    Threshold, morph by ``steps``, smooth, then add boundary-band noise.

    Noise is seeded from the input plane's bytes, so the predictor is
    deterministic for a fixed input.
    """

    def __init__(self, name: str, params: SyntheticPredictorParams, steps: int, sigma: float):
        self.name = name
        self.params = params
        self.steps = steps
        self.sigma = sigma

    def _rng(self, plane: np.ndarray) -> np.random.Generator:
        digest = hashlib.sha1(np.ascontiguousarray(plane, dtype=np.float32).tobytes()).digest()
        return np.random.default_rng([int.from_bytes(digest[:8], "little"), self.params.seed])

    def __call__(self, plane: np.ndarray) -> np.ndarray:
        plane = np.asarray(plane, dtype=np.float64)
        mask = morph(plane >= self.params.threshold, self.steps, _FACES_2D)
        probability = gaussian_filter(mask.astype(np.float64), sigma=self.params.smooth, mode="constant")
        if self.sigma > 0.0:
            band = boundary_band(mask, _FACES_2D)
            noise = self._rng(plane).uniform(-1.0, 1.0, size=plane.shape) * self.sigma
            probability = np.where(band, probability + noise, probability)
        return np.clip(probability, 0.0, 1.0)


def biased_sigma(b: float, params: SyntheticPredictorParams) -> float:
    """
    Boundary noise amplitude of a model trained on style-``b`` labels.

    With ``signed_sigma`` (the default) the amplitude is
    ``sigma_base + sigma_gain * b``, floored at 0: over-segmented training
    labels give a noisier boundary and under-segmented ones a cleaner one.
    Otherwise it is ``sigma_base + sigma_gain * |b|``.
    """
    if params.signed_sigma:
        return max(0.0, params.sigma_base + params.sigma_gain * b)
    return max(0.0, params.sigma_base + params.sigma_gain * abs(b))


def synthetic_predictor(name: str, params: Optional[Dict] = None) -> SyntheticPredictor:
    """
    Built-in predictor.

    Args:
        name: ``oracle`` (smoothed thresholded input), ``noisy_boundary``
            (oracle plus band noise of amplitude ``sigma``) or ``biased``
            (input morphed by ``b`` steps, band noise ``biased_sigma(b)``)
        params: Overrides of :class:`SyntheticPredictorParams`

    Returns:
        Predictor
    """
    values = dict(params or {})
    if "b" in values:
        values["b"] = int(np.floor(float(values["b"]) + 0.5))
    config = SyntheticPredictorParams(**values)
    if name == "oracle":
        return SyntheticPredictor("synthetic:oracle", config, steps=0, sigma=0.0)
    if name == "noisy_boundary":
        return SyntheticPredictor(f"synthetic:noisy_boundary:sigma={config.sigma}", config, 0, config.sigma)
    if name == "biased":
        return SyntheticPredictor(f"synthetic:biased:b={config.b}", config, config.b, biased_sigma(config.b, config))
    raise SimulationError(f"unknown synthetic predictor {name!r}; expected oracle, noisy_boundary or biased")


# Cohorts
class CohortPreset(BaseModel):
    """Geometry, subject count, object sizes and rater models of a synthetic cohort."""
    geometry: Geometry
    n_subjects: int = Field(..., ge=1)
    n_objects: int = Field(default=2, ge=1)
    size_range: Tuple[float, float] = (5.0, 9.0)
    noise_sigma: float = Field(default=0.1, ge=0.0)
    raters: List[RaterModel] = Field(..., min_length=1)


def _center_raters(center_id: str, prefix: str, style: float, offsets: Sequence[float], jitter: float, flips: float):
    return [
        RaterModel(
            rater_id=f"{prefix}{i + 1}",
            center_id=center_id,
            center_style=style,
            rater_offset=offset,
            jitter_sigma=jitter,
            flip_rate=flips,
        )
        for i, offset in enumerate(offsets)
    ]


def _paper_shape() -> CohortPreset:
    # 7 raters in a 4-2-1 center split; center gaps exceed three times the rater offsets.
    raters = (
        _center_raters("A", "a", 2.0, (-0.6, -0.2, 0.2, 0.6), 0.3, 0.05)
        + _center_raters("B", "b", -2.0, (-0.4, 0.4), 0.3, 0.05)
        + _center_raters("C", "c", 0.0, (0.0,), 0.3, 0.05)
    )
    return CohortPreset(
        geometry=Geometry(dims=(64, 64, 8)),
        n_subjects=20,
        n_objects=2,
        size_range=(6.0, 10.0),
        raters=raters,
    )


def _desk() -> CohortPreset:
    raters = (
        _center_raters("A", "a", 1.0, (-0.2, 0.2), 0.3, 0.02)
        + _center_raters("B", "b", -1.0, (0.0,), 0.3, 0.02)
        + _center_raters("C", "c", 0.0, (0.0,), 0.3, 0.02)
    )
    return CohortPreset(
        geometry=Geometry(dims=(24, 24, 4)),
        n_subjects=4,
        n_objects=1,
        size_range=(4.0, 6.0),
        raters=raters,
    )


PRESETS = {"paper-shape": _paper_shape, "desk": _desk}


def preset(name: str, n_subjects: Optional[int] = None) -> CohortPreset:
    """Named cohort preset, optionally with a different subject count."""
    if name not in PRESETS:
        raise SimulationError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    cohort = PRESETS[name]()
    if n_subjects is not None:
        cohort = cohort.model_copy(update={"n_subjects": n_subjects})
    return cohort


def load_rater_models(path: Union[str, Path]) -> Dict[str, RaterModel]:
    """rater_id -> RaterModel from a JSON list (``raters.json`` or a simulate spec)."""
    try:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(rows, dict):
            rows = rows.get("raters", [])
        models = [RaterModel.model_validate(row) for row in rows]
    except (OSError, ValueError) as e:
        raise SimulationError(f"{path}: cannot read rater models ({e})") from e
    if not models:
        raise SimulationError(f"{path}: no rater models")
    return {m.rater_id: m for m in models}


def generate_cohort(
    cohort: CohortPreset,
    seed: int,
    out_dir: Union[str, Path],
    metadata: Optional[Dict] = None,
) -> Path:
    """
    Simulate and write a cohort.

    Layout: ``manifest.json``, ``raters.json`` and per subject
    ``<subject>/image.rvol``, ``truth.rvol`` and ``<rater>.rvol``. Subject ``i``
    uses seed ``[seed, i]``; rater ``j`` on it uses ``[seed, i, j + 1]``.

    Args:
        cohort: Cohort description
        seed: Root seed
        out_dir: Output directory
        metadata: Optional run description stored in every RVOL header

    Returns:
        Manifest path
    """
    out = Path(out_dir)
    ids = [r.rater_id for r in cohort.raters]
    if len(set(ids)) != len(ids):
        raise SimulationError("rater ids must be unique")

    subjects: List[SubjectRecord] = []
    for i in range(cohort.n_subjects):
        subject_id = f"sub-{i + 1:02d}"
        phantom = generate_phantom(
            cohort.geometry, cohort.n_objects, cohort.size_range, [seed, i], cohort.noise_sigma
        )
        save_volume(phantom.intensity, out / subject_id / "image.rvol", metadata=metadata)
        save_volume(phantom.true_mask, out / subject_id / "truth.rvol", metadata=metadata)
        entries = []
        for j, model in enumerate(cohort.raters):
            mask = simulate_rater(phantom, model, [seed, i, j + 1])
            save_volume(mask, out / subject_id / f"{model.rater_id}.rvol", metadata=metadata)
            entries.append(
                ManifestEntry(
                    rater_id=model.rater_id,
                    center_id=model.center_id,
                    mask_path=f"{subject_id}/{model.rater_id}.rvol",
                )
            )
        subjects.append(
            SubjectRecord(
                subject_id=subject_id,
                entries=entries,
                image_path=f"{subject_id}/image.rvol",
                truth_path=f"{subject_id}/truth.rvol",
            )
        )

    manifest_path = save_manifest(DatasetManifest(subjects=subjects), out / "manifest.json")
    write_json(out / "raters.json", [m.model_dump() for m in cohort.raters])
    logger.info(
        f"Simulated {cohort.n_subjects} subjects x {len(cohort.raters)} raters "
        f"on {cohort.geometry.dims} into {out}"
    )
    return manifest_path
