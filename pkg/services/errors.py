"""
Exception hierarchy for RaterLab.

Hard precondition violations raise one of these; conditions the analysis can
survive (an empty consensus, a degenerate EM step) are returned as flags on
the result instead.
"""
from typing import Optional, Sequence


class RaterLabError(Exception):
    """Base class for every domain error; the CLI maps it to exit code 1."""


class VolumeFormatError(RaterLabError):
    """An RVOL header or raw payload is missing, malformed or inconsistent."""


class GeometryMismatchError(RaterLabError):
    """Volumes that must share a voxel grid do not."""


class ManifestError(RaterLabError):
    """A dataset manifest violates its invariants or a lookup fails."""


class FusionError(RaterLabError):
    """A consensus cannot be computed for the requested rater set."""


class MetricError(RaterLabError):
    """A style metric received unusable inputs."""


class ClusteringError(RaterLabError):
    """A cluster validity index is undefined for the grouping."""


class UncertaintyError(RaterLabError):
    """The test-time augmentation harness received unusable inputs."""


class PredictorError(UncertaintyError):
    """A predictor failed on one Monte-Carlo sample."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        self.sample_index = sample_index
        if sample_index is not None:
            message = f"sample {sample_index}: {message}"
        super().__init__(message)


class MissingPredictionError(PredictorError):
    """Precomputed predictions are missing; their inputs were exported under ``keys``."""

    def __init__(self, keys: Sequence[str], directory: Optional[str] = None):
        self.keys = list(dict.fromkeys(keys))
        self.directory = directory
        where = f" in {directory}" if directory else ""
        shown = ", ".join(self.keys[:5]) + (" ..." if len(self.keys) > 5 else "")
        super().__init__(
            f"{len(self.keys)} missing prediction(s){where}; inputs exported for the external model: {shown}"
        )


class EvaluationError(RaterLabError):
    """An evaluation statistic is undefined for its inputs."""


class SimulationError(RaterLabError):
    """A synthetic phantom or rater cannot be generated."""
