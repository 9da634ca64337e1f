"""
Output writers for the CLI: every table gets a ``<file>.meta.json`` sidecar
with the run configuration; JSON documents embed it under ``config``.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Union

import pandas as pd

from cli.models import RunConfig
from utils.atomic import meta_path, write_csv, write_json
from utils.logger import get_logger

logger = get_logger(__name__)


def write_table(
    path: Union[str, Path],
    frame: pd.DataFrame,
    config: RunConfig,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """CSV plus metadata sidecar; ``extra`` adds table-specific fields to the sidecar."""
    path = Path(path)
    write_csv(path, frame)
    write_json(meta_path(path), config.metadata({"file": path.name, "rows": len(frame), **(extra or {})}))
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_document(path: Union[str, Path], document: Dict[str, Any], config: RunConfig) -> Path:
    """JSON document with the run configuration under ``config``."""
    path = Path(path)
    write_json(path, {**document, "config": config.metadata()})
    logger.info(f"Wrote {path}")
    return path
