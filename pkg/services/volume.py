"""
Volumetric mask operations for RaterLab: counting, resampling, cropping, slicing.

All functions are pure; volumes are never modified in place.
"""
import math
from typing import List, Sequence

import numpy as np

from services.errors import GeometryMismatchError, MetricError
from services.models import Geometry, Volume, VolumeKind


def positive_count(v: Volume) -> int:
    """
    Count voxels equal to 1 in a binary mask.

    Args:
        v: Binary mask

    Returns:
        Number of positive voxels
    """
    if v.kind != VolumeKind.MASK:
        raise MetricError(f"positive_count needs a binary mask, got kind {v.kind.value!r}")
    return int(np.count_nonzero(v.values))


def require_same_geometry(volumes: Sequence[Volume]) -> Geometry:
    """Return the shared geometry of ``volumes`` or raise GeometryMismatchError."""
    if not volumes:
        raise GeometryMismatchError("no volumes given")
    geometry = volumes[0].geometry
    for index, volume in enumerate(volumes[1:], start=1):
        if volume.geometry != geometry:
            raise GeometryMismatchError(
                f"volume {index} has geometry {volume.geometry.dims}/{volume.geometry.spacing}, "
                f"expected {geometry.dims}/{geometry.spacing}"
            )
    return geometry


def _nearest_indices(n_in: int, spacing_in: float, n_out: int, spacing_out: float) -> np.ndarray:
    # Output voxel center at (o + 0.5) * spacing_out mm; the input voxel containing it is nearest.
    centers = (np.arange(n_out) + 0.5) * spacing_out
    return np.clip(np.floor(centers / spacing_in).astype(np.int64), 0, n_in - 1)


def resample_nn(v: Volume, target_spacing: Sequence[float]) -> Volume:
    """
    Nearest-neighbor resampling to a new voxel spacing.

    Output dims are ``round(dim * spacing / target)``, clamped to at least one
    voxel. Binary masks stay binary.

    Args:
        v: Volume to resample
        target_spacing: Target spacing in mm (x, y, z)

    Returns:
        Resampled volume
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(not math.isfinite(s) or s <= 0 for s in target):
        raise ValueError(f"target spacing must be three positive reals, got {target_spacing}")
    if target == tuple(v.geometry.spacing):
        return v

    dims_out = []
    index_axes = []
    for n_in, sp_in, sp_out in zip(v.geometry.dims, v.geometry.spacing, target):
        n_out = max(1, int(math.floor(n_in * sp_in / sp_out + 0.5)))
        dims_out.append(n_out)
        index_axes.append(_nearest_indices(n_in, sp_in, n_out, sp_out))

    values = v.values[np.ix_(*index_axes)]
    return Volume(geometry=Geometry(dims=tuple(dims_out), spacing=target), kind=v.kind, values=values)


def center_crop(v: Volume, target_dims_xy: Sequence[int]) -> Volume:
    """
    Crop the x/y extent to a centered window, keeping every z slice.

    The window starts at ``(src - target) // 2`` on each axis.

    Args:
        v: Volume to crop
        target_dims_xy: Window size (x, y)

    Returns:
        Cropped volume
    """
    tx, ty = (int(d) for d in target_dims_xy)
    sx, sy, _ = v.geometry.dims
    if tx < 1 or ty < 1:
        raise ValueError(f"crop size must be positive, got {(tx, ty)}")
    if tx > sx or ty > sy:
        raise GeometryMismatchError(f"crop {(tx, ty)} exceeds source extent {(sx, sy)}")
    x0, y0 = (sx - tx) // 2, (sy - ty) // 2
    values = v.values[x0:x0 + tx, y0:y0 + ty, :]
    geometry = Geometry(dims=(tx, ty, v.geometry.dims[2]), spacing=v.geometry.spacing)
    return Volume(geometry=geometry, kind=v.kind, values=values)


def slices(v: Volume) -> List[np.ndarray]:
    """Axial planes in ascending z; plane k is ``values[:, :, k]`` (read-only views)."""
    return [v.values[:, :, k] for k in range(v.geometry.dims[2])]


def stack_slices(planes: Sequence[np.ndarray], geometry: Geometry, kind: VolumeKind) -> Volume:
    """Inverse of :func:`slices`."""
    if len(planes) != geometry.dims[2]:
        raise GeometryMismatchError(f"expected {geometry.dims[2]} planes, got {len(planes)}")
    return Volume(geometry=geometry, kind=kind, values=np.stack(planes, axis=2))


def threshold(v: Volume, level: float = 0.5) -> Volume:
    """Binarize a probability map: voxel = 1 where value >= level."""
    return Volume(geometry=v.geometry, kind=VolumeKind.MASK, values=v.values >= level)
