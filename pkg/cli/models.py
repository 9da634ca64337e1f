"""
Run configuration echoed into every RaterLab output.
"""
import argparse
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field

from config.settings import settings
from services.models import ConsensusScope, TtaRanges

# Namespace entries that are plumbing rather than configuration.
_INTERNAL = {"handler", "command"}


def _json_safe(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, ConsensusScope):
        return value.label
    if isinstance(value, TtaRanges):
        return value.model_dump()
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    return value


class RunConfig(BaseModel):
    """Fully resolved command line of one run."""
    app_name: str = settings.app_name
    app_version: str = settings.app_version
    command: str
    seed: int = Field(..., ge=0)
    threads: int = Field(..., ge=1)
    log_level: str
    options: Dict[str, Any] = Field(default_factory=dict)
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    @classmethod
    def from_args(cls, args: argparse.Namespace, threads: int) -> "RunConfig":
        options = {
            key: _json_safe(value)
            for key, value in sorted(vars(args).items())
            if key not in _INTERNAL and key not in ("seed", "threads", "log_level")
        }
        return cls(
            command=args.command,
            seed=args.seed,
            threads=threads,
            log_level=args.log_level.upper(),
            options=options,
        )

    def metadata(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """JSON-ready echo of the run, optionally with step-specific fields."""
        data = self.model_dump(mode="json")
        if extra:
            data.update(_json_safe(extra))
        return data
