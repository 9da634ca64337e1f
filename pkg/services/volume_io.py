"""
RVOL volume and dataset manifest I/O for RaterLab.

An RVOL volume is a JSON header ``<name>.rvol`` with ``dims``, ``spacing_mm``,
``dtype`` (``u8`` or ``f32``) and ``kind`` (``mask``, ``prob`` or ``image``),
next to a raw little-endian payload ``<name>.raw`` stored x-fastest, then y,
then z.
"""
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import ValidationError

from services.errors import ManifestError, VolumeFormatError
from services.models import DatasetManifest, Geometry, Volume, VolumeKind
from utils.atomic import write_bytes, write_json
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}
_KIND_DTYPE = {VolumeKind.MASK: "u8", VolumeKind.PROBABILITY: "f32", VolumeKind.IMAGE: "f32"}


def raw_path_for(header_path: PathLike) -> Path:
    """Raw payload path belonging to an RVOL header."""
    return Path(header_path).with_suffix(".raw")


def save_volume(v: Volume, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write a volume as an RVOL header plus raw payload, atomically.

    Args:
        v: Volume to write
        path: Header path (``.rvol``)
        metadata: Optional JSON-serializable object stored in the header

    Returns:
        Header path
    """
    header_path = Path(path)
    dtype_name = _KIND_DTYPE[v.kind]
    payload = np.asarray(v.values, dtype=_DTYPES[dtype_name]).tobytes(order="F")
    header: Dict[str, Any] = {
        "dims": list(v.geometry.dims),
        "spacing_mm": list(v.geometry.spacing),
        "dtype": dtype_name,
        "kind": v.kind.value,
    }
    if metadata is not None:
        header["metadata"] = metadata

    write_bytes(raw_path_for(header_path), payload)
    write_json(header_path, header)
    logger.debug(f"Wrote {v.kind.value} volume {v.geometry.dims} to {header_path}")
    return header_path


def read_header(path: PathLike) -> Dict[str, Any]:
    """Parse and check an RVOL header."""
    header_path = Path(path)
    if not header_path.is_file():
        raise VolumeFormatError(f"missing RVOL header {header_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{header_path}: invalid JSON header ({e})") from e

    missing = [key for key in ("dims", "spacing_mm", "dtype", "kind") if key not in header]
    if missing:
        raise VolumeFormatError(f"{header_path}: header lacks {missing}")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    try:
        kind = VolumeKind(header["kind"])
    except ValueError as e:
        raise VolumeFormatError(f"{header_path}: unknown kind {header['kind']!r}") from e
    if _KIND_DTYPE[kind] != header["dtype"]:
        raise VolumeFormatError(f"{header_path}: kind {kind.value!r} must be stored as {_KIND_DTYPE[kind]}")
    return header


def load_volume(path: PathLike) -> Volume:
    """
    Read an RVOL volume.

    Args:
        path: Header path (``.rvol``)

    Returns:
        Volume with the declared geometry and kind

    Raises:
        VolumeFormatError: missing file, size mismatch or values outside the declared kind
    """
    header_path = Path(path)
    header = read_header(header_path)
    raw_path = raw_path_for(header_path)
    if not raw_path.is_file():
        raise VolumeFormatError(f"missing RVOL payload {raw_path}")

    try:
        geometry = Geometry(dims=tuple(header["dims"]), spacing=tuple(header["spacing_mm"]))
    except (ValidationError, TypeError) as e:
        raise VolumeFormatError(f"{header_path}: invalid geometry ({e})") from e

    dtype = _DTYPES[header["dtype"]]
    payload = raw_path.read_bytes()
    expected = geometry.n_voxels * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: {len(payload)} bytes on disk, header dims {geometry.dims} need {expected}"
        )

    values = np.frombuffer(payload, dtype=dtype).reshape(geometry.dims, order="F")
    kind = VolumeKind(header["kind"])
    try:
        return Volume(geometry=geometry, kind=kind, values=values)
    except ValidationError as e:
        raise VolumeFormatError(f"{header_path}: values do not fit kind {kind.value!r} ({e})") from e


def load_manifest(path: PathLike) -> DatasetManifest:
    """
    Read a dataset manifest; relative paths resolve against its directory.

    Args:
        path: Manifest JSON path

    Returns:
        Validated manifest
    """
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise ManifestError(f"missing manifest {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest = DatasetManifest.model_validate(data)
    except (json.JSONDecodeError, ValidationError) as e:
        raise ManifestError(f"{manifest_path}: {e}") from e
    return manifest.model_copy(update={"base_dir": manifest_path.parent})


def save_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    """Write a manifest as JSON, atomically."""
    write_json(path, manifest.model_dump(mode="json", exclude_none=True))
    return Path(path)


def load_entry_mask(manifest: DatasetManifest, subject_id: str, rater_id: str) -> Volume:
    """Load one rater's mask for one subject."""
    entry = manifest.subject(subject_id).entry(rater_id)
    if entry is None:
        raise ManifestError(f"rater {rater_id!r} did not annotate subject {subject_id!r}")
    volume = load_volume(manifest.resolve(entry.mask_path))
    if volume.kind != VolumeKind.MASK:
        raise VolumeFormatError(f"{entry.mask_path}: expected a mask, got {volume.kind.value!r}")
    return volume
