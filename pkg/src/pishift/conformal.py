"""Split conformal prediction for regression with absolute-residual scores."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

INF = math.inf

# Slack for comparing cumulative mass against 1 - alpha in floating point.
MASS_TOL = 1e-12


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


@dataclass(frozen=True)
class ScoreSet:
    """Nonnegative conformal scores from one data split."""

    scores: np.ndarray
    source: str = "calibration"

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=float).ravel()
        if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr < 0)):
            raise InvalidInputError("scores must be finite and nonnegative")
        if self.source not in ("calibration", "test"):
            raise InvalidInputError(f"unknown score source {self.source!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)

    def __len__(self):
        return self.scores.size


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    half_width: float

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def contains(self, y: float) -> bool:
        if math.isinf(self.half_width):
            return True
        return abs(self.center - y) <= self.half_width


def _as_scores(scores) -> np.ndarray:
    if isinstance(scores, ScoreSet):
        return scores.scores
    return ScoreSet(scores).scores


def conformal_score(prediction, truth):
    """Absolute residual ``|prediction - truth|``; works elementwise on arrays."""
    out = np.abs(np.asarray(prediction, dtype=float) - np.asarray(truth, dtype=float))
    return float(out) if out.ndim == 0 else out


def quantile_rank(alpha: float, n: int) -> int:
    """1-based order statistic ``ceil((1 - alpha)(n + 1))`` of the augmented set."""
    k = math.ceil((1.0 - alpha) * (n + 1) - MASS_TOL * (n + 1))
    return max(k, 1)


def augmented_quantile(alpha: float, scores) -> float:
    """(1 - alpha) quantile of ``scores`` with an extra point mass at +inf.

    Returns ``math.inf`` when the rank lands on the augmented point.
    """
    alpha = check_alpha(alpha)
    arr = _as_scores(scores)
    n = arr.size
    if n == 0:
        raise InvalidInputError("calibration scores are empty")
    k = quantile_rank(alpha, n)
    if k > n:
        return INF
    return float(np.partition(arr, k - 1)[k - 1])


def predict_interval(prediction: float, alpha: float, cal_scores) -> PredictionInterval:
    return PredictionInterval(float(prediction), augmented_quantile(alpha, cal_scores))


def empirical_coverage(intervals: Sequence[PredictionInterval], truths: Sequence[float]) -> float:
    if len(intervals) != len(truths):
        raise InvalidInputError(
            f"{len(intervals)} intervals but {len(truths)} truths"
        )
    if not intervals:
        raise InvalidInputError("no intervals to evaluate")
    hits = sum(iv.contains(y) for iv, y in zip(intervals, truths))
    return hits / len(intervals)
