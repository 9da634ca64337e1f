"""
Pydantic models for RaterLab.
"""
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationInfo,
    field_validator,
    model_validator,
)

from config.settings import settings
from services.errors import ManifestError


class VolumeKind(str, Enum):
    """Value semantics of a voxel grid (the RVOL ``kind`` field)."""
    MASK = "mask"
    PROBABILITY = "prob"
    IMAGE = "image"


class FusionMethod(str, Enum):
    """Label fusion methods."""
    MAJORITY = "majority"
    STAPLE = "staple"
    CENTER_WEIGHTED = "center-weighted"


class ScopeKind(str, Enum):
    """Which raters a consensus is built from."""
    GLOBAL = "global"
    CENTER = "center"
    CUSTOM = "custom"


class ModelScopeKind(str, Enum):
    """Ground-truth source of a (synthetic) model, as in the comparison table."""
    RATER = "rater"
    CENTER_CONSENSUS = "center-consensus"
    GLOBAL_CONSENSUS = "global-consensus"
    RATERS_AVERAGE = "raters-average"


class Interpolation(str, Enum):
    """Warp interpolation order."""
    BILINEAR = "bilinear"
    NEAREST = "nearest"


# Volumes
class Geometry(BaseModel):
    """Voxel grid: dims (x, y, z) and spacing in mm."""
    model_config = ConfigDict(frozen=True)

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v):
        if any(d < 1 for d in v):
            raise ValueError(f"dims must be >= 1, got {v}")
        return v

    @field_validator("spacing")
    @classmethod
    def validate_spacing(cls, v):
        if any(not math.isfinite(s) or s <= 0 for s in v):
            raise ValueError(f"spacing must be finite and > 0, got {v}")
        return v

    @property
    def n_voxels(self) -> int:
        return math.prod(self.dims)


class Volume(BaseModel):
    """An immutable 3D voxel grid; ``values[i, j, k]`` is voxel (x=i, y=j, z=k)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    geometry: Geometry
    kind: VolumeKind = VolumeKind.MASK
    values: np.ndarray

    @field_validator("values")
    @classmethod
    def coerce_values(cls, v, info: ValidationInfo):
        arr = np.asarray(v)
        kind = info.data.get("kind")
        if kind == VolumeKind.MASK:
            if arr.dtype != np.bool_ and not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        else:
            arr = arr.astype(np.float32)
            if not np.isfinite(arr).all():
                raise ValueError("volume values must be finite")
            if kind == VolumeKind.PROBABILITY and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError("probability values must lie in [0, 1]")
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def validate_shape(self):
        if tuple(self.values.shape) != tuple(self.geometry.dims):
            raise ValueError(
                f"value grid shape {self.values.shape} does not match dims {self.geometry.dims}"
            )
        return self

    @classmethod
    def from_array(
        cls,
        values,
        kind: VolumeKind = VolumeKind.MASK,
        spacing: Sequence[float] = (1.0, 1.0, 1.0),
    ) -> "Volume":
        """Build a volume from a 3D (or 2D, promoted to one slice) array."""
        arr = np.asarray(values)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"expected a 2D or 3D array, got {arr.ndim}D")
        geometry = Geometry(dims=tuple(int(d) for d in arr.shape), spacing=tuple(spacing))
        return cls(geometry=geometry, kind=kind, values=arr)

    def with_values(self, values, kind: Optional[VolumeKind] = None) -> "Volume":
        """Same geometry, new values."""
        return Volume(geometry=self.geometry, kind=kind or self.kind, values=values)

    def as_bool(self) -> np.ndarray:
        return self.values.astype(bool)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.kind == other.kind
            and np.array_equal(self.values, other.values)
        )


# Manifest
class ManifestEntry(BaseModel):
    """One rater's annotation of one subject."""
    rater_id: str = Field(..., min_length=1)
    center_id: str = Field(..., min_length=1)
    mask_path: str = Field(..., min_length=1)


class SubjectRecord(BaseModel):
    """All annotations (and optional intensity/truth volumes) of one subject."""
    subject_id: str = Field(..., min_length=1)
    entries: List[ManifestEntry] = Field(..., min_length=1)
    image_path: Optional[str] = None
    truth_path: Optional[str] = None

    @field_validator("entries")
    @classmethod
    def validate_unique_raters(cls, v):
        seen = set()
        for entry in v:
            if entry.rater_id in seen:
                raise ValueError(f"rater {entry.rater_id!r} annotated the subject twice")
            seen.add(entry.rater_id)
        return v

    def entry(self, rater_id: str) -> Optional[ManifestEntry]:
        for entry in self.entries:
            if entry.rater_id == rater_id:
                return entry
        return None


class DatasetManifest(BaseModel):
    """Subjects x raters x centers, with file references relative to ``base_dir``."""
    subjects: List[SubjectRecord] = Field(..., min_length=1)
    base_dir: Optional[Path] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def validate_structure(self):
        subject_ids = [s.subject_id for s in self.subjects]
        if len(set(subject_ids)) != len(subject_ids):
            raise ValueError("subject ids must be unique")
        centers: Dict[str, str] = {}
        for subject in self.subjects:
            for entry in subject.entries:
                known = centers.setdefault(entry.rater_id, entry.center_id)
                if known != entry.center_id:
                    raise ValueError(
                        f"rater {entry.rater_id!r} appears with centers {known!r} and {entry.center_id!r}"
                    )
        return self

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    def rater_centers(self) -> Dict[str, str]:
        """rater_id -> center_id, sorted by rater id."""
        mapping = {e.rater_id: e.center_id for s in self.subjects for e in s.entries}
        return dict(sorted(mapping.items()))

    def centers(self) -> Dict[str, List[str]]:
        """center_id -> sorted rater ids."""
        grouped: Dict[str, List[str]] = {}
        for rater_id, center_id in self.rater_centers().items():
            grouped.setdefault(center_id, []).append(rater_id)
        return dict(sorted(grouped.items()))

    def subject(self, subject_id: str) -> SubjectRecord:
        for subject in self.subjects:
            if subject.subject_id == subject_id:
                return subject
        raise ManifestError(f"unknown subject {subject_id!r}")

    def resolve(self, relative: str) -> Path:
        """Resolve a manifest path against the manifest's directory."""
        path = Path(relative)
        if path.is_absolute() or self.base_dir is None:
            return path
        return self.base_dir / path


# Fusion
class StapleParams(BaseModel):
    """Per-rater STAPLE performance parameters plus EM controls."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sensitivities: List[float] = Field(..., min_length=1)
    specificities: List[float] = Field(..., min_length=1)
    prior: Optional[float] = None  # None: mean fraction of positive votes
    prior_map: Optional[Volume] = None
    max_iters: int = Field(default_factory=lambda: settings.staple_max_iters, ge=1)
    tol: float = Field(default_factory=lambda: settings.staple_tol, gt=0)

    @field_validator("sensitivities", "specificities")
    @classmethod
    def validate_open_unit(cls, v):
        if any(not 0.0 < x < 1.0 for x in v):
            raise ValueError("rater performance parameters must lie in (0, 1)")
        return v

    @field_validator("prior")
    @classmethod
    def validate_prior(cls, v):
        if v is not None and not 0.0 < v < 1.0:
            raise ValueError("scalar prior must lie in (0, 1)")
        return v

    @model_validator(mode="after")
    def validate_lengths(self):
        if len(self.sensitivities) != len(self.specificities):
            raise ValueError("sensitivities and specificities must have one entry per rater")
        if self.prior_map is not None and self.prior_map.kind != VolumeKind.PROBABILITY:
            raise ValueError("prior_map must be a probability map")
        return self

    @classmethod
    def initial(cls, n_raters: int, value: Optional[float] = None, **kwargs) -> "StapleParams":
        """Symmetric near-perfect initialization for ``n_raters`` raters."""
        value = settings.staple_init if value is None else value
        return cls(sensitivities=[value] * n_raters, specificities=[value] * n_raters, **kwargs)


class FusionResult(BaseModel):
    """Consensus mask plus, for STAPLE, the posterior and final rater parameters."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: FusionMethod
    rater_ids: List[str] = Field(default_factory=list)
    consensus: Volume
    posterior: Optional[Volume] = None
    final_params: Optional[StapleParams] = None
    iterations: int = Field(default=0, ge=0)
    converged: bool = True
    flags: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_posterior(self):
        if (self.posterior is not None) != (self.method == FusionMethod.STAPLE):
            raise ValueError("posterior must be present exactly for STAPLE results")
        if self.posterior is not None and self.posterior.geometry != self.consensus.geometry:
            raise ValueError("posterior and consensus geometries differ")
        return self

    def summary(self) -> Dict:
        """JSON-ready description without voxel data."""
        summary = {
            "method": self.method.value,
            "rater_ids": self.rater_ids,
            "iterations": self.iterations,
            "converged": self.converged,
            "flags": self.flags,
        }
        if self.final_params is not None:
            summary["final_params"] = self.final_params.model_dump(exclude={"prior_map"})
        return summary


# Style
class ConsensusScope(BaseModel):
    """Rater subset a consensus is fused from: everyone, one center, or a list."""
    kind: ScopeKind = ScopeKind.GLOBAL
    center_id: Optional[str] = None
    rater_ids: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_kind(self):
        if self.kind == ScopeKind.CENTER and not self.center_id:
            raise ValueError("center scope needs a center_id")
        if self.kind == ScopeKind.CUSTOM and not self.rater_ids:
            raise ValueError("custom scope needs rater_ids")
        return self

    @classmethod
    def parse(cls, text: str) -> "ConsensusScope":
        """Parse ``global``, ``center:<id>`` or ``raters:<a>,<b>``."""
        if text == "global":
            return cls()
        prefix, _, rest = text.partition(":")
        if prefix == "center" and rest:
            return cls(kind=ScopeKind.CENTER, center_id=rest)
        if prefix == "raters" and rest:
            return cls(kind=ScopeKind.CUSTOM, rater_ids=sorted(r for r in rest.split(",") if r))
        raise ValueError(f"invalid scope {text!r}; expected global, center:<id> or raters:<a>,<b>")

    @property
    def label(self) -> str:
        if self.kind == ScopeKind.CENTER:
            return f"center:{self.center_id}"
        if self.kind == ScopeKind.CUSTOM:
            return "raters:" + ",".join(self.rater_ids)
        return "global"

    def select(self, manifest: DatasetManifest) -> List[str]:
        """Sorted rater ids of ``manifest`` inside this scope."""
        centers = manifest.rater_centers()
        if self.kind == ScopeKind.GLOBAL:
            selected = list(centers)
        elif self.kind == ScopeKind.CENTER:
            selected = [r for r, c in centers.items() if c == self.center_id]
        else:
            missing = sorted(set(self.rater_ids) - set(centers))
            if missing:
                raise ManifestError(f"unknown raters in scope: {missing}")
            selected = sorted(self.rater_ids)
        if not selected:
            raise ManifestError(f"scope {self.label} selects no raters")
        return selected


class RaterStyle(BaseModel):
    """Bias/consistency of one rater against a consensus."""
    rater_id: str
    center_id: str
    n_images: int = Field(..., ge=1)
    bias: float
    consistency: float = Field(..., ge=0.0)
    relative_bias: Optional[float] = None
    relative_consistency: Optional[float] = Field(default=None, ge=0.0)
    skipped_images: int = Field(default=0, ge=0)
    mean_assd: Optional[float] = Field(default=None, ge=0.0)


class StyleTable(BaseModel):
    """One RaterStyle row per rater in scope, sorted by rater id."""
    rows: List[RaterStyle]
    consensus_method: FusionMethod = FusionMethod.MAJORITY
    consensus_scope: ConsensusScope = Field(default_factory=ConsensusScope)
    slice_wise: bool = False

    @field_validator("rows")
    @classmethod
    def validate_rows(cls, v):
        ids = [row.rater_id for row in v]
        if len(set(ids)) != len(ids):
            raise ValueError("one row per rater")
        return sorted(v, key=lambda row: row.rater_id)

    def row(self, rater_id: str) -> RaterStyle:
        for row in self.rows:
            if row.rater_id == rater_id:
                return row
        raise KeyError(rater_id)


# Clustering
class StylePoint(BaseModel):
    """A rater in (bias, consistency) space."""
    rater_id: str
    center_id: str
    coords: Tuple[float, float]

    @field_validator("coords")
    @classmethod
    def validate_finite(cls, v):
        if not all(math.isfinite(c) for c in v):
            raise ValueError("style coordinates must be finite")
        return v


class CentroidDistance(BaseModel):
    center_a: str
    center_b: str
    distance: float = Field(..., ge=0.0)


class ClusterReport(BaseModel):
    """Center-wise structure of rater styles."""
    centroids: Dict[str, Tuple[float, float]]
    radii: Dict[str, float]
    scatter: Dict[str, float]
    sizes: Dict[str, int]
    distances: List[CentroidDistance] = Field(default_factory=list)
    db_index: Optional[float] = Field(default=None, ge=0.0)
    n_clusters: int
    flags: List[str] = Field(default_factory=list)


# Uncertainty
class TtaRanges(BaseModel):
    """Uniform sampling ranges for test-time augmentation."""
    rotation_deg: Tuple[float, float] = (-10.0, 10.0)
    translation_px: Tuple[float, float] = (-3.0, 3.0)
    scale: Tuple[float, float] = (0.98, 1.02)

    @field_validator("rotation_deg", "translation_px", "scale")
    @classmethod
    def validate_range(cls, v):
        lo, hi = v
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"malformed range {v}")
        return v

    @field_validator("scale")
    @classmethod
    def validate_scale(cls, v):
        if v[0] <= 0:
            raise ValueError("scale range must be positive")
        return v

    @classmethod
    def symmetric(cls, rotation_deg: float, translation_px: float, scale_delta: float) -> "TtaRanges":
        """Ranges centered on the identity: +-rotation, +-translation, 1 +- scale_delta."""
        return cls(
            rotation_deg=(-abs(rotation_deg), abs(rotation_deg)),
            translation_px=(-abs(translation_px), abs(translation_px)),
            scale=(1.0 - abs(scale_delta), 1.0 + abs(scale_delta)),
        )

    @classmethod
    def identity(cls) -> "TtaRanges":
        return cls(rotation_deg=(0.0, 0.0), translation_px=(0.0, 0.0), scale=(1.0, 1.0))

    @classmethod
    def from_settings(cls) -> "TtaRanges":
        return cls.symmetric(settings.tta_rotation_deg, settings.tta_translation_px, settings.tta_scale_delta)

    def max_displacement(self, shape: Sequence[int]) -> float:
        """Upper bound, in pixels, on how far any pixel of a plane of ``shape`` can move."""
        radius = 0.5 * math.hypot(shape[0] - 1, shape[1] - 1)
        theta = math.radians(max(abs(self.rotation_deg[0]), abs(self.rotation_deg[1])))
        scale_dev = max(abs(1.0 - self.scale[0]), abs(self.scale[1] - 1.0))
        shift = math.sqrt(2.0) * max(abs(self.translation_px[0]), abs(self.translation_px[1]))
        return shift + radius * (scale_dev + (1.0 + scale_dev) * 2.0 * math.sin(theta / 2.0))


class TtaTransform(BaseModel):
    """In-plane similarity transform about the plane center."""
    model_config = ConfigDict(frozen=True)

    rotation_deg: float = 0.0
    translation_px: Tuple[float, float] = (0.0, 0.0)
    scale: float = Field(default=1.0, gt=0.0)

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.translation_px == (0.0, 0.0) and self.scale == 1.0

    def linear(self) -> np.ndarray:
        """Forward linear part ``scale * R(rotation)`` acting on (axis0, axis1)."""
        theta = math.radians(self.rotation_deg)
        c, s = math.cos(theta), math.sin(theta)
        return self.scale * np.array([[c, -s], [s, c]])

    def inverse(self) -> "TtaTransform":
        inv_linear = np.linalg.inv(self.linear())
        shift = -inv_linear @ np.asarray(self.translation_px, dtype=float)
        return TtaTransform(
            rotation_deg=-self.rotation_deg,
            translation_px=(float(shift[0]), float(shift[1])),
            scale=1.0 / self.scale,
        )


class McStack(BaseModel):
    """Monte-Carlo probability planes, in draw order."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: List[np.ndarray] = Field(..., min_length=1)
    transforms: List[TtaTransform] = Field(default_factory=list)

    @field_validator("samples")
    @classmethod
    def validate_samples(cls, v):
        shape = np.shape(v[0])
        arrays = []
        for sample in v:
            arr = np.asarray(sample, dtype=np.float64)
            if arr.shape != shape:
                raise ValueError("all Monte-Carlo samples must share one shape")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError("Monte-Carlo samples must lie in [0, 1]")
            arrays.append(arr)
        return arrays

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def as_array(self) -> np.ndarray:
        return np.stack(self.samples, axis=0)


class UncertaintyReport(BaseModel):
    """Per-image entropy maps and their scalar summaries for one model."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    entropy_maps: List[np.ndarray] = Field(default_factory=list, exclude=True)
    per_image_union: List[Optional[float]] = Field(default_factory=list)
    per_image_all: List[float] = Field(default_factory=list)
    mean_entropy_union: Optional[float] = None
    mean_entropy_all: float = Field(..., ge=0.0)
    n_samples: Optional[int] = None
    seed: Optional[int] = None
    entropy_unit: str = "nats"
    skipped_images: int = 0
    flags: List[str] = Field(default_factory=list)


class ModelScope(BaseModel):
    """Ground-truth source a model stands for: one rater, a center consensus or the global one."""
    label: str
    kind: ModelScopeKind
    center_id: Optional[str] = None
    rater_ids: List[str] = Field(..., min_length=1)


# Evaluation
class RegressionResult(BaseModel):
    """Ordinary least squares fit with intercept."""
    slope: float
    intercept: float
    r_squared: float = Field(..., ge=0.0, le=1.0)
    n: int = Field(..., ge=3)


class ComparisonRow(BaseModel):
    scope: ModelScopeKind
    label: str
    center_id: Optional[str] = None
    dice: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    uncertainty: Optional[float] = None
    uncertainty_all: Optional[float] = None
    bias: Optional[float] = None


class ComparisonTable(BaseModel):
    """Per-rater, per-center-consensus and global-consensus comparison rows."""
    rows: List[ComparisonRow] = Field(default_factory=list)
    consensus_ratio: Optional[float] = None
    flags: List[str] = Field(default_factory=list)


# Simulation
class RaterModel(BaseModel):
    """Parametric rater: signed morphological style plus per-image jitter and boundary flips."""
    rater_id: str = Field(..., min_length=1)
    center_id: str = Field(..., min_length=1)
    center_style: float = 0.0
    rater_offset: float = 0.0
    jitter_sigma: float = Field(default=0.0, ge=0.0)
    flip_rate: float = Field(default=0.0, ge=0.0, lt=1.0)

    @property
    def mean_iterations(self) -> float:
        return self.center_style + self.rater_offset


class Ellipsoid(BaseModel):
    center: Tuple[int, int, int]
    radii: Tuple[float, float, float]


class Phantom(BaseModel):
    """Synthetic subject: union of ellipsoids plus a noisy intensity volume."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    geometry: Geometry
    true_mask: Volume
    intensity: Volume
    ellipsoids: List[Ellipsoid] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_phantom(self):
        if self.true_mask.kind != VolumeKind.MASK or not self.true_mask.values.any():
            raise ValueError("phantom true mask must be a nonempty binary mask")
        if self.true_mask.geometry != self.geometry or self.intensity.geometry != self.geometry:
            raise ValueError("phantom volumes must share the phantom geometry")
        return self
