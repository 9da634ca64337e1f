"""
Test-time augmentation transforms for RaterLab.

A transform is an in-plane similarity (rotation, translation, scaling) about
the plane center, applied with zero padding outside the plane.
"""
from typing import Union

import numpy as np
from scipy.ndimage import affine_transform

from services.errors import UncertaintyError
from services.models import Interpolation, TtaRanges, TtaTransform

RngLike = Union[int, np.random.Generator, np.random.SeedSequence, None]


def sample_transform(ranges: TtaRanges, rng_state: RngLike) -> TtaTransform:
    """
    Draw one transform, each component uniform in its range.

    Components are drawn in a fixed order (rotation, translation x,
    translation y, scale) so a given generator state always yields the same
    transform.

    Args:
        ranges: Sampling ranges
        rng_state: Generator, seed or seed sequence

    Returns:
        Sampled transform
    """
    rng = np.random.default_rng(rng_state)
    rotation = float(rng.uniform(*ranges.rotation_deg))
    tx = float(rng.uniform(*ranges.translation_px))
    ty = float(rng.uniform(*ranges.translation_px))
    scale = float(rng.uniform(*ranges.scale))
    return TtaTransform(rotation_deg=rotation, translation_px=(tx, ty), scale=scale)


def apply_transform(
    plane: np.ndarray,
    t: TtaTransform,
    interp: Interpolation = Interpolation.BILINEAR,
) -> np.ndarray:
    """
    Warp a 2D plane: output(p) = input(T^-1(p)) with
    ``T(p) = c + scale * R(rotation) (p - c) + translation``.

    Args:
        plane: 2D grid
        t: Transform
        interp: Bilinear for images and probability maps, nearest for masks

    Returns:
        Warped plane (float64), zero outside the source
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise UncertaintyError(f"expected a nonempty 2D plane, got shape {plane.shape}")
    if t.is_identity:
        return plane.copy()

    center = (np.asarray(plane.shape, dtype=np.float64) - 1.0) / 2.0
    inverse = np.linalg.inv(t.linear())
    offset = center - inverse @ (center + np.asarray(t.translation_px, dtype=np.float64))
    order = 1 if interp == Interpolation.BILINEAR else 0
    return affine_transform(
        plane, inverse, offset=offset, order=order, mode="constant", cval=0.0, prefilter=False
    )
