"""
Predictor plug-ins for the uncertainty harness.

A predictor maps a 2D grayscale plane to a same-shaped probability map,
deterministically for a fixed input. Three families are available:
precomputed (exchange files with an external model through a directory),
subprocess (one command invocation per plane, RVOL in/out) and the built-in
synthetic predictors of :mod:`services.simulate`.
"""
import hashlib
import re
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Union

import numpy as np

from services.errors import MissingPredictionError, PredictorError, UncertaintyError
from services.models import ModelScope, RaterModel, Volume, VolumeKind
from services.volume_io import load_volume, save_volume
from utils.logger import get_logger

logger = get_logger(__name__)


class Predictor(Protocol):
    """Plane -> probability map of the same shape, values in [0, 1]."""

    name: str

    def __call__(self, plane: np.ndarray) -> np.ndarray:
        ...


def check_prediction(prediction: np.ndarray, plane: np.ndarray) -> np.ndarray:
    """Validate a predictor output against its input plane."""
    prediction = np.asarray(prediction, dtype=np.float64)
    if prediction.shape != np.shape(plane):
        raise PredictorError(f"prediction shape {prediction.shape} differs from input {np.shape(plane)}")
    if not np.isfinite(prediction).all() or prediction.min() < 0.0 or prediction.max() > 1.0:
        raise PredictorError("prediction values must lie in [0, 1]")
    return prediction


def plane_key(plane: np.ndarray) -> str:
    """Content hash of a plane; names its files in precomputed mode."""
    data = np.ascontiguousarray(plane, dtype=np.float32)
    digest = hashlib.sha1(repr(data.shape).encode("ascii"))
    digest.update(data.tobytes())
    return digest.hexdigest()[:20]


def _plane_volume(plane: np.ndarray) -> Volume:
    return Volume.from_array(np.asarray(plane, dtype=np.float32), kind=VolumeKind.IMAGE)


class PrecomputedPredictor:
    """
    Reads ``<key>_pred.rvol`` for each plane from a directory.

    When a prediction is missing the transformed input is exported as
    ``<key>_input.rvol`` and the call raises :class:`MissingPredictionError`.
    The harness finishes every draw and plane before re-raising, so a single
    run exports all inputs; running the external model over them and
    rerunning the harness completes the exchange.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.name = f"precomputed:{self.directory}"

    def __call__(self, plane: np.ndarray) -> np.ndarray:
        key = plane_key(plane)
        prediction_path = self.directory / f"{key}_pred.rvol"
        if prediction_path.is_file():
            return load_volume(prediction_path).values[:, :, 0]
        save_volume(_plane_volume(plane), self.directory / f"{key}_input.rvol")
        logger.debug(f"No prediction for plane {key} in {self.directory}; exported its input")
        raise MissingPredictionError([key], str(self.directory))


class SubprocessPredictor:
    """
    Runs a command once per plane.

    ``{input}`` and ``{output}`` in the argument list are replaced by RVOL
    paths; without placeholders both paths are appended.
    """

    def __init__(self, argv: List[str], timeout: Optional[float] = None):
        if not argv:
            raise UncertaintyError("subprocess predictor needs a command")
        self.argv = list(argv)
        self.timeout = timeout
        self.name = "cmd:" + " ".join(argv)

    def __call__(self, plane: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="raterlab-pred-") as tmp:
            input_path = save_volume(_plane_volume(plane), Path(tmp) / "input.rvol")
            output_path = Path(tmp) / "output.rvol"
            command = [
                arg.replace("{input}", str(input_path)).replace("{output}", str(output_path))
                for arg in self.argv
            ]
            if not any("{input}" in arg or "{output}" in arg for arg in self.argv):
                command += [str(input_path), str(output_path)]
            try:
                completed = subprocess.run(command, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise PredictorError(f"could not run {command[0]!r}: {e}") from e
            if completed.returncode != 0:
                raise PredictorError(
                    f"{command[0]!r} exited with {completed.returncode}: {completed.stderr.strip()[:500]}"
                )
            return load_volume(output_path).values[:, :, 0]


def _parse_params(text: str) -> Dict[str, Union[float, str]]:
    params: Dict[str, Union[float, str]] = {}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise UncertaintyError(f"synthetic predictor parameter {item!r} is not key=value")
        try:
            params[key.strip()] = float(value)
        except ValueError:
            params[key.strip()] = value.strip()
    return params


def scope_style(scope: ModelScope, rater_models: Dict[str, RaterModel]) -> float:
    """Injected style of a scope: mean of its raters' mean iterations."""
    missing = [r for r in scope.rater_ids if r not in rater_models]
    if missing:
        raise UncertaintyError(f"no rater model for {missing}; pass the cohort's raters.json")
    return float(np.mean([rater_models[r].mean_iterations for r in scope.rater_ids]))


def _safe_label(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def predictor_for_scope(
    spec: str,
    scope: Optional[ModelScope] = None,
    rater_models: Optional[Dict[str, RaterModel]] = None,
) -> Predictor:
    """
    Build the predictor standing for one model scope.

    Spec forms:
        ``precomputed:<dir>``   files under ``<dir>/<scope label>/``
        ``cmd:<argv>``          ``{scope}`` in the command is replaced by the scope label
        ``synthetic:<name>[:k=v,...]``  built-in predictors; ``biased`` takes its
                                style ``b`` from the scope's rater models unless given

    Args:
        spec: Predictor spec string
        scope: Model scope (optional outside scope-wise runs)
        rater_models: rater_id -> RaterModel, needed for ``synthetic:biased``

    Returns:
        Predictor
    """
    family, _, rest = spec.partition(":")
    if not rest:
        raise UncertaintyError(f"invalid predictor spec {spec!r}")
    label = scope.label if scope is not None else ""

    if family == "precomputed":
        directory = Path(rest)
        return PrecomputedPredictor(directory / _safe_label(label) if label else directory)
    if family == "cmd":
        argv = [arg.replace("{scope}", label) for arg in shlex.split(rest)]
        return SubprocessPredictor(argv)
    if family == "synthetic":
        from services.simulate import synthetic_predictor

        name, _, param_text = rest.partition(":")
        params = _parse_params(param_text)
        if name == "biased" and "b" not in params:
            if scope is None:
                raise UncertaintyError("synthetic:biased needs b=<steps> or a model scope")
            params["b"] = float(np.floor(scope_style(scope, rater_models or {}) + 0.5))
        return synthetic_predictor(name, params)
    raise UncertaintyError(f"unknown predictor family {family!r}")
