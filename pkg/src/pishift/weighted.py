"""Importance-weighted conformal prediction under covariate shift.

Likelihood ratios come from two Gaussian kernel density estimates, one on the
test features and one on the calibration features. Calibration scores are then
reweighted into a discrete distribution with an extra point mass at +inf, and
quantiles are read off that distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conformal import INF, MASS_TOL, ScoreSet, check_alpha
from .errors import InvalidInputError, SearchFailure

DEFAULT_FLOOR = 1e-12
DEFAULT_CAP = 20.0
DEFAULT_BANDWIDTHS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2)

_CHUNK = 2048


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInputError("points must be a list of vectors")
    return arr


@dataclass(frozen=True)
class KdeModel:
    """Isotropic Gaussian mixture with one kernel per sample point."""

    points: np.ndarray
    bandwidth: float

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def log_density(self, x) -> np.ndarray:
        """Log density at each row of ``x`` (shape ``(m, dim)`` or ``(dim,)``)."""
        q = np.asarray(x, dtype=float)
        if q.ndim == 1:
            q = q[None, :] if self.dim > 1 or q.size == 1 else q[:, None]
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise InvalidInputError(
                f"query dimension {q.shape[-1]} does not match model dimension {self.dim}"
            )
        h2 = self.bandwidth**2
        log_norm = -0.5 * self.dim * math.log(2.0 * math.pi * h2) - math.log(self.n)
        sq_pts = np.einsum("ij,ij->i", self.points, self.points)
        out = np.empty(q.shape[0])
        for start in range(0, q.shape[0], _CHUNK):
            block = q[start:start + _CHUNK]
            sq = (
                np.einsum("ij,ij->i", block, block)[:, None]
                - 2.0 * block @ self.points.T
                + sq_pts[None, :]
            )
            np.maximum(sq, 0.0, out=sq)
            a = sq * (-0.5 / h2)
            top = a.max(axis=1)
            np.exp(a - top[:, None], out=a)
            out[start:start + _CHUNK] = np.log(a.sum(axis=1)) + top + log_norm
        return out

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))


def kde_fit(points, bandwidth: float) -> KdeModel:
    if isinstance(points, np.ndarray):
        arr = _as_points(points)
    else:
        rows = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
        if len({r.shape for r in rows}) > 1:
            raise InvalidInputError("points have inconsistent dimensions")
        arr = _as_points(np.array(rows)) if rows else np.empty((0, 1))
    if arr.shape[0] < 2:
        raise InvalidInputError(f"KDE needs at least 2 points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("KDE points must be finite")
    if not (bandwidth > 0 and math.isfinite(bandwidth)):
        raise InvalidInputError(f"bandwidth must be positive, got {bandwidth}")
    arr = arr.copy()
    arr.setflags(write=False)
    return KdeModel(arr, float(bandwidth))


def kde_density(model: KdeModel, x) -> float:
    """Density of ``model`` at a single point ``x``."""
    q = np.atleast_1d(np.asarray(x, dtype=float))
    if q.ndim != 1 or q.size != model.dim:
        raise InvalidInputError(f"expected a vector of length {model.dim}")
    return float(model.density(q[None, :])[0])


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine map to zero mean and unit variance."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, points) -> "Standardizer":
        arr = _as_points(points)
        sd = arr.std(axis=0)
        sd[~(sd > 0)] = 1.0
        return cls(arr.mean(axis=0), sd)

    def transform(self, points) -> np.ndarray:
        return (_as_points(points) - self.mean) / self.scale


def likelihood_ratios(test_kde: KdeModel, cal_kde: KdeModel, x,
                      floor: float = DEFAULT_FLOOR, cap: float = DEFAULT_CAP) -> np.ndarray:
    """Vectorised ``test density / calibration density`` clipped to ``[floor, cap]``."""
    if test_kde.dim != cal_kde.dim:
        raise InvalidInputError("test and calibration KDEs have different dimensions")
    if not 0 < floor < cap:
        raise InvalidInputError("need 0 < floor < cap")
    log_t = test_kde.log_density(x)
    log_c = np.maximum(cal_kde.log_density(x), math.log(floor))
    with np.errstate(over="ignore"):
        ratio = np.exp(log_t - log_c)
    return np.clip(ratio, floor, cap)


def likelihood_ratio(test_kde: KdeModel, cal_kde: KdeModel, x,
                     floor: float = DEFAULT_FLOOR, cap: float = DEFAULT_CAP) -> float:
    q = np.atleast_1d(np.asarray(x, dtype=float))
    if q.ndim != 1 or q.size != cal_kde.dim:
        raise InvalidInputError(f"expected a vector of length {cal_kde.dim}")
    return float(likelihood_ratios(test_kde, cal_kde, q[None, :], floor, cap)[0])


@dataclass(frozen=True)
class ShiftWeights:
    cal_weights: np.ndarray
    test_weight: float

    def __post_init__(self):
        w = np.asarray(self.cal_weights, dtype=float).ravel()
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise InvalidInputError("calibration weights must be finite and positive")
        if not (math.isfinite(self.test_weight) and self.test_weight > 0):
            raise InvalidInputError("test weight must be finite and positive")
        w.setflags(write=False)
        object.__setattr__(self, "cal_weights", w)
        object.__setattr__(self, "test_weight", float(self.test_weight))


def normalize_weights(weights: ShiftWeights) -> tuple[np.ndarray, float]:
    total = weights.cal_weights.sum() + weights.test_weight
    return weights.cal_weights / total, weights.test_weight / total


@dataclass(frozen=True)
class WeightedDistribution:
    """Point masses on finite scores (ascending, merged) plus a mass at +inf."""

    scores: np.ndarray
    masses: np.ndarray
    infinity_mass: float

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        m = np.asarray(self.masses, dtype=float)
        if s.shape != m.shape or s.ndim != 1:
            raise InvalidInputError("scores and masses must be equal-length vectors")
        if np.any(m < 0) or self.infinity_mass < 0:
            raise InvalidInputError("masses must be nonnegative")
        if np.any(np.diff(s) <= 0):
            raise InvalidInputError("atoms must be strictly ascending")
        if abs(m.sum() + self.infinity_mass - 1.0) > 1e-12:
            raise InvalidInputError("masses must sum to 1")
        s.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "masses", m)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.scores.tolist(), self.masses.tolist()))

    @classmethod
    def from_atoms(cls, scores, masses, infinity_mass: float) -> "WeightedDistribution":
        """Sort atoms and merge equal scores by summing their masses."""
        s = np.asarray(scores, dtype=float).ravel()
        m = np.asarray(masses, dtype=float).ravel()
        if s.shape != m.shape:
            raise InvalidInputError(f"{s.size} scores but {m.size} masses")
        uniq, inverse = np.unique(s, return_inverse=True)
        merged = np.bincount(inverse.ravel(), weights=m, minlength=uniq.size)
        # absorb rounding so the total is exactly representable as 1
        inf_mass = float(infinity_mass)
        drift = merged.sum() + inf_mass - 1.0
        if abs(drift) < 1e-9:
            inf_mass = max(inf_mass - drift, 0.0)
        return cls(uniq, merged, inf_mass)


def weighted_distribution(cal_scores, weights: ShiftWeights) -> WeightedDistribution:
    scores = cal_scores.scores if isinstance(cal_scores, ScoreSet) else ScoreSet(cal_scores).scores
    if scores.size != weights.cal_weights.size:
        raise InvalidInputError(
            f"{scores.size} calibration scores but {weights.cal_weights.size} weights"
        )
    cal_mass, test_mass = normalize_weights(weights)
    return WeightedDistribution.from_atoms(scores, cal_mass, test_mass)


def weighted_quantile(alpha: float, dist: WeightedDistribution) -> float:
    """Smallest atom whose cumulative mass reaches ``1 - alpha``; +inf otherwise."""
    alpha = check_alpha(alpha)
    cum = np.cumsum(dist.masses)
    idx = np.searchsorted(cum, (1.0 - alpha) - MASS_TOL, side="left")
    if idx >= cum.size:
        return INF
    return float(dist.scores[idx])


def per_query_quantiles(alpha: float, cal_scores, cal_weights, test_weights):
    """Weighted quantile for many test points at once.

    Each test point ``x`` gets its own distribution, differing only in the
    infinity mass ``w(x)`` and the shared normaliser. Returns
    ``(v_q, expected_coverage)`` arrays; the coverage is the finite mass at or
    below each quantile and equals ``1 - p_inf(x)`` where ``v_q`` is +inf.
    """
    alpha = check_alpha(alpha)
    scores = np.asarray(cal_scores, dtype=float)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    cum = np.cumsum(np.asarray(cal_weights, dtype=float)[order])
    tw = np.asarray(test_weights, dtype=float)
    total = cum[-1] + tw
    idx = np.searchsorted(cum, ((1.0 - alpha) - MASS_TOL) * total, side="left")
    finite = idx < s.size
    v_q = np.full(tw.shape, INF)
    v_q[finite] = s[idx[finite]]
    # include ties at the quantile value
    upto = np.searchsorted(s, v_q, side="right")
    covered = np.where(upto > 0, cum[np.maximum(upto - 1, 0)], 0.0)
    return v_q, covered / total


def bandwidth_grid_search(points, grid: Sequence[float] = DEFAULT_BANDWIDTHS,
                          folds: int = 5, seed: int = 0) -> float:
    """Pick the bandwidth with the best K-fold held-out log-likelihood.

    Ties go to the smaller bandwidth.
    """
    arr = _as_points(points)
    grid = sorted(float(h) for h in grid)
    if not grid or any(not h > 0 for h in grid):
        raise InvalidInputError("bandwidth grid must be nonempty and positive")
    if folds < 2:
        raise InvalidInputError("need at least 2 folds")
    n = arr.shape[0]
    if n < folds or n - n // folds < 2:
        raise InvalidInputError(f"{n} points are too few for {folds}-fold search")
    if len(grid) == 1:
        return grid[0]

    perm = np.random.default_rng(seed).permutation(n)
    splits = np.array_split(perm, folds)
    best_h, best_score = None, -INF
    failed = []
    for h in grid:
        fold_scores = []
        for k in range(folds):
            held = splits[k]
            train = np.concatenate([splits[j] for j in range(folds) if j != k])
            ll = KdeModel(arr[train], h).log_density(arr[held])
            fold_scores.append(ll.mean())
        score = float(np.mean(fold_scores))
        if not math.isfinite(score):
            failed.append(h)
            continue
        if score > best_score:
            best_h, best_score = h, score
    if best_h is None:
        raise SearchFailure("every bandwidth gave a degenerate likelihood", failed)
    return best_h
