"""
Atomic output writes for RaterLab.

Every artifact is written to a temporary file in the destination directory
and moved into place with ``os.replace`` so readers never see a partial file.
"""
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Union

import pandas as pd

PathLike = Union[str, Path]


@contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """
    Yield a temporary path next to ``path``; rename it over ``path`` on success.

    Args:
        path: Final destination

    Yields:
        Temporary path to write to
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    os.close(fd)
    tmp_path = Path(tmp_name)
    try:
        yield tmp_path
        os.replace(tmp_path, target)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


def write_bytes(path: PathLike, payload: bytes) -> None:
    """Atomically write raw bytes."""
    with atomic_path(path) as tmp:
        tmp.write_bytes(payload)


def write_json(path: PathLike, payload: Any) -> None:
    """Atomically write a JSON document with stable key order."""
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    with atomic_path(path) as tmp:
        tmp.write_text(text + "\n", encoding="utf-8")


def meta_path(path: PathLike) -> Path:
    """Sidecar path of a table: ``<file>.meta.json``."""
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_csv(path: PathLike, frame: pd.DataFrame) -> None:
    """Atomically write a DataFrame as CSV without the index."""
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.12g", lineterminator="\n")
