"""Discrete SIR and SIS models of weekly infection counts."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

log = logging.getLogger(__name__)

VARIANTS = ("SIR", "SIS")
INTERVALS = ("initiation", "acceleration", "deceleration", "subsidence")
PANDEMIC_THRESHOLDS = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class EpiParams:
    variant: str
    beta: float
    gamma: float

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and nonnegative, got {v}")
        if self.gamma > 1:
            log.warning("gamma=%g exceeds 1 per week; weekly steps will overshoot", self.gamma)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "beta": self.beta, "gamma": self.gamma}


def sir_delta_I(I_t, cum_I, N, params: EpiParams):
    """Weekly change in infections; ``cum_I`` sums I from the period start through t."""
    I_t = np.asarray(I_t, dtype=float)
    susceptible = N - I_t - params.gamma * np.asarray(cum_I, dtype=float)
    out = (params.beta * susceptible / N - params.gamma) * I_t
    return float(out) if out.ndim == 0 else out


def sis_delta_I(I_t, N, params: EpiParams):
    I_t = np.asarray(I_t, dtype=float)
    out = (params.beta * (N - I_t) / N - params.gamma) * I_t
    return float(out) if out.ndim == 0 else out


def delta_I(params: EpiParams, I_t, cum_I, N):
    if params.variant == "SIR":
        return sir_delta_I(I_t, cum_I, N, params)
    return sis_delta_I(I_t, N, params)


def period_cumsum(counts, boundaries: Sequence[int]) -> np.ndarray:
    """Running sum of ``counts`` restarted at every boundary index."""
    counts = np.asarray(counts, dtype=float)
    out = np.empty_like(counts)
    edges = sorted(set(boundaries) | {0}) + [counts.size]
    for a, b in zip(edges[:-1], edges[1:]):
        out[a:b] = np.cumsum(counts[a:b])
    return out


@dataclass
class Trajectory:
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray


def simulate(params: EpiParams, I_0: float, N: float, steps: int,
             boundaries: Sequence[int] = (0,)) -> Trajectory:
    """Forward weekly steps of the discrete model.

    ``R[t]`` counts recoveries before week t in the current period and is 0 at
    every boundary. The infection update uses the period-local cumulative sum
    through week t, exactly as ``sir_delta_I`` does, so teacher-forced fits on
    a simulated path are exact. ``I`` is clamped so no compartment goes
    negative.
    """
    if not 0 <= I_0 <= N:
        raise InvalidInputError(f"I_0={I_0} must lie in [0, N={N}]")
    starts = set(boundaries) | {0}
    S = np.empty(steps)
    I = np.empty(steps)
    R = np.zeros(steps)
    cum = 0.0
    I_t = float(I_0)
    recovered = 0.0
    for t in range(steps):
        if t in starts:
            cum = 0.0
            recovered = 0.0
        if params.variant == "SIS":
            recovered = 0.0
        I_t = min(max(I_t, 0.0), N - recovered)
        I[t] = I_t
        R[t] = recovered
        S[t] = N - I_t - recovered
        cum += I_t
        dI = delta_I(params, I_t, cum, N)
        if params.variant == "SIR":
            recovered = min(recovered + params.gamma * I_t, N)
        I_t = I_t + dI
    return Trajectory(S, I, R)


def teacher_forced_samples(counts, boundaries: Sequence[int]):
    """Rows ``(t, I(t), cum_I(t), dI(t))`` for steps that stay inside one period."""
    counts = np.asarray(counts, dtype=float)
    cum = period_cumsum(counts, boundaries)
    starts = set(boundaries) | {0}
    t = np.array([k for k in range(counts.size - 1) if (k + 1) not in starts], dtype=int)
    return t, counts[t], cum[t], counts[t + 1] - counts[t]


def fit_epidemic(variant: str, I_t, cum_I, dI, N: float,
                 beta_grid: Sequence[float] | None = None,
                 gamma_grid: Sequence[float] | None = None) -> EpiParams:
    """Grid search for (beta, gamma) minimising one-step squared error.

    Ties go to the smaller beta, then the smaller gamma.
    """
    if beta_grid is None:
        beta_grid = np.linspace(0.0, 1.0, 51)
    if gamma_grid is None:
        gamma_grid = np.linspace(0.0, 1.0, 51)
    betas = np.sort(np.asarray(beta_grid, dtype=float))
    gammas = np.sort(np.asarray(gamma_grid, dtype=float))
    if betas.size == 0 or gammas.size == 0:
        raise InvalidInputError("parameter grids must be nonempty")
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}")
    I_t = np.asarray(I_t, dtype=float)
    cum_I = np.asarray(cum_I, dtype=float)
    dI = np.asarray(dI, dtype=float)
    if I_t.size == 0:
        raise InvalidInputError("no samples to fit")

    # dI_hat = beta * a - gamma * b with a, b independent of the parameters
    if variant == "SIR":
        b_coef = I_t
        a0 = (N - I_t) * I_t / N
        a1 = cum_I * I_t / N
        pred = (betas[:, None, None] * (a0[None, None, :] - gammas[None, :, None] * a1[None, None, :])
                - gammas[None, :, None] * b_coef[None, None, :])
    else:
        a = (N - I_t) * I_t / N
        pred = betas[:, None, None] * a[None, None, :] - gammas[None, :, None] * I_t[None, None, :]
    mse = np.mean((pred - dI[None, None, :]) ** 2, axis=2)
    # argmin on the flattened (beta-major) array returns the first minimum
    i, j = np.unravel_index(np.argmin(mse), mse.shape)
    return EpiParams(variant, float(betas[i]), float(gammas[j]))


@dataclass(frozen=True)
class PandemicIntervals:
    """Interval endpoints within one epidemic period.

    ``t1 <= t2 <= t3`` are 1-based week numbers counted from the period start:
    the first week whose running share of the period's infections reaches 5%,
    50% and 95%. As 0-based offsets they are exclusive ends, giving
    Initiation ``[0, t1)``, Acceleration ``[t1, t2)``, Deceleration
    ``[t2, t3)`` and Subsidence ``[t3, length)``.
    """

    start: int
    length: int
    t1: int
    t2: int
    t3: int

    def labels(self) -> np.ndarray:
        """Interval index (0-3) for every week of the period."""
        off = np.arange(self.length)
        return np.searchsorted([self.t1, self.t2, self.t3], off, side="right")


def pandemic_split(counts, start: int = 0, end: int | None = None,
                   thresholds: Sequence[float] = PANDEMIC_THRESHOLDS) -> PandemicIntervals:
    counts = np.asarray(counts, dtype=float)
    end = counts.size if end is None else end
    block = counts[start:end]
    total = block.sum()
    if not total > 0:
        raise InvalidInputError(f"period starting at {start} has no infections")
    share = np.cumsum(block) / total
    ends = [int(np.searchsorted(share, thr - 1e-12, side="left")) + 1 for thr in thresholds]
    return PandemicIntervals(start, block.size, *ends)


def default_population(counts, boundaries: Sequence[int], multiple: float = 10.0) -> float:
    """Fallback N: a multiple of the largest per-period infection total."""
    counts = np.asarray(counts, dtype=float)
    edges = sorted(set(boundaries) | {0}) + [counts.size]
    totals = [counts[a:b].sum() for a, b in zip(edges[:-1], edges[1:]) if b > a]
    return multiple * max(max(totals), 1.0)
