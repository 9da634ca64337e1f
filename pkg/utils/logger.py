"""
Loguru setup for RaterLab.

Every module logs through ``get_logger(__name__)``; the CLI calls
``setup_logging`` again once ``--log-level`` is known.
"""
import sys
from pathlib import Path
from typing import Any, Dict, Optional

from loguru import logger

from config.settings import settings


def setup_logging(
    log_level: Optional[str] = None,
    log_file: Optional[str] = None,
) -> None:
    """
    Replace every loguru sink with RaterLab's stderr sink and optional file sink.

    Args:
        log_level: Minimum level name; defaults to RATERLAB_LOG_LEVEL
        log_file: Extra rotating log file; defaults to RATERLAB_LOG_FILE
    """
    level = (log_level or settings.log_level).upper()
    log_file = log_file or settings.log_file

    logger.remove()
    logger.configure(extra={"name": settings.app_name.lower()})
    logger.add(sys.stderr, level=level, format=settings.log_format, colorize=sys.stderr.isatty())

    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        logger.add(path, level=level, format=settings.log_format, rotation="10 MB", retention="7 days")


def get_logger(name: str):
    """Module logger; ``name`` shows up in every record."""
    return logger.bind(name=name)


setup_logging()


def log_stage_start(stage: str, **context: Any) -> None:
    """Log the start of a pipeline stage."""
    logger.bind(name="raterlab.stage", stage=stage, action="stage_start", **context).info(
        f"Starting {stage}"
    )


def log_stage_complete(stage: str, elapsed: float, **context: Any) -> None:
    """Log the completion of a pipeline stage."""
    logger.bind(
        name="raterlab.stage", stage=stage, elapsed=elapsed, action="stage_complete", **context
    ).info(f"{stage} completed in {elapsed:.2f}s")


def log_error(error: Exception, context: Optional[Dict[str, Any]] = None) -> None:
    """Log a domain error with the command context it occurred in."""
    logger.bind(
        name="raterlab.error", error_type=type(error).__name__, context=context or {}
    ).error(f"{type(error).__name__}: {error}")
