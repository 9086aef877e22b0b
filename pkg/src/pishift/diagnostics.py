"""Coverage divergence between weighted calibration scores and test scores.

For a quantile ``v_q`` of the weighted calibration distribution, the expected
coverage is the finite calibration mass at or below ``v_q`` and the exact
coverage is the fraction of test scores at or below it. Their difference is the
coverage divergence; integrating its magnitude gives a Wasserstein-type
distance between the two score CDFs.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .conformal import INF, MASS_TOL, ScoreSet, check_alpha
from .errors import InvalidInputError
from .weighted import WeightedDistribution, per_query_quantiles, weighted_quantile

DEFAULT_ALPHAS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def _test_array(test_scores) -> np.ndarray:
    arr = test_scores.scores if isinstance(test_scores, ScoreSet) else ScoreSet(test_scores, "test").scores
    if arr.size == 0:
        raise InvalidInputError("test scores are empty")
    return arr


def expected_coverage(v_q: float, dist: WeightedDistribution) -> float:
    """Finite calibration mass at or below ``v_q``; the +inf atom never counts."""
    if not math.isfinite(v_q):
        raise InvalidInputError("expected coverage is undefined for an infinite quantile")
    upto = np.searchsorted(dist.scores, v_q, side="right")
    return float(dist.masses[:upto].sum())


def exact_coverage(v_q: float, test_scores) -> float:
    arr = _test_array(test_scores)
    return float(np.count_nonzero(arr <= v_q)) / arr.size


def coverage_divergence(v_q: float, dist: WeightedDistribution, test_scores) -> float:
    return expected_coverage(v_q, dist) - exact_coverage(v_q, test_scores)


@dataclass(frozen=True)
class DivergencePoint:
    alpha: float
    v_q: float
    expected_cov: float
    exact_cov: float
    divergence: float

    @classmethod
    def build(cls, alpha, v_q, expected_cov, exact_cov) -> "DivergencePoint":
        return cls(float(alpha), float(v_q), float(expected_cov), float(exact_cov),
                   float(expected_cov) - float(exact_cov))


def divergence_point(alpha: float, dist: WeightedDistribution, test_scores) -> DivergencePoint:
    """One curve point. An infinite quantile covers every finite atom and test score."""
    v_q = weighted_quantile(alpha, dist)
    if math.isinf(v_q):
        return DivergencePoint.build(alpha, v_q, float(dist.masses.sum()), 1.0)
    return DivergencePoint.build(alpha, v_q, expected_coverage(v_q, dist),
                                 exact_coverage(v_q, test_scores))


def divergence_curve(alphas: Sequence[float], dist: WeightedDistribution, test_scores) -> list[DivergencePoint]:
    return [divergence_point(a, dist, test_scores) for a in sorted(alphas)]


def per_query_curve(alphas: Sequence[float], cal_scores, cal_weights,
                    test_scores, test_weights) -> list[DivergencePoint]:
    """Curve with a separate weighted distribution for every test point.

    Each test point is judged against its own quantile; the reported ``v_q``
    and both coverages are averages over the test points.
    """
    t = _test_array(test_scores)
    tw = np.asarray(test_weights, dtype=float)
    if tw.shape != t.shape:
        raise InvalidInputError("need one test weight per test score")
    points = []
    for a in sorted(alphas):
        v_q, expected = per_query_quantiles(a, cal_scores, cal_weights, tw)
        exact = float(np.mean(t <= v_q))
        points.append(DivergencePoint.build(a, float(np.mean(v_q)), float(np.mean(expected)), exact))
    return points


def grid_step(alphas: Sequence[float]) -> float:
    a = np.sort(np.asarray(alphas, dtype=float))
    if a.size == 1:
        return 1.0
    steps = np.diff(a)
    if np.ptp(steps) > 1e-9:
        raise InvalidInputError("alpha grid must be evenly spaced")
    return float(steps.mean())


def curve_area(points: Sequence[DivergencePoint], raw_sum: bool = False) -> float:
    """Area under ``|D|`` along the alpha grid (plain sum when ``raw_sum``)."""
    total = math.fsum(abs(p.divergence) for p in points)
    if raw_sum:
        return total
    return total * grid_step([p.alpha for p in points])


def wasserstein_grid(alphas: Sequence[float], dist: WeightedDistribution, test_scores,
                     raw_sum: bool = False) -> float:
    """Sum of ``|D|`` over the alpha grid, scaled by the grid step."""
    for a in alphas:
        check_alpha(a)
    if list(alphas) != sorted(alphas):
        raise InvalidInputError("alphas must be sorted")
    return curve_area(divergence_curve(alphas, dist, test_scores), raw_sum)


def wasserstein_exact(dist: WeightedDistribution, test_scores) -> float:
    """Area between the calibration and test score CDFs.

    The calibration side drops the +inf atom and renormalises its finite
    masses so both CDFs reach 1.
    """
    t = np.sort(_test_array(test_scores))
    finite = float(dist.masses.sum())
    if dist.scores.size == 0 or finite <= 0:
        raise InvalidInputError("calibration distribution has no finite support")
    cal_cdf = np.cumsum(dist.masses) / finite
    support = np.union1d(dist.scores, t)
    ci = np.searchsorted(dist.scores, support, side="right")
    f_cal = np.where(ci > 0, cal_cdf[np.maximum(ci - 1, 0)], 0.0)
    f_test = np.searchsorted(t, support, side="right") / t.size
    gaps = np.diff(support)
    diff = np.abs(f_cal[:-1] - f_test[:-1])
    # renormalising leaves rounding residue where the CDFs agree
    diff[diff <= MASS_TOL] = 0.0
    return float(np.sum(diff * gaps))


def prediction_size(alpha: float, dist: WeightedDistribution) -> float:
    """Width of the symmetric residual interval, ``2 * v_q``."""
    return 2.0 * weighted_quantile(alpha, dist)


def accuracy_metrics(predictions, truths) -> tuple[float, float]:
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(truths, dtype=float).ravel()
    if p.size != y.size:
        raise InvalidInputError(f"{p.size} predictions but {y.size} truths")
    if p.size == 0:
        raise InvalidInputError("no predictions")
    err = p - y
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))


def _encode(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def _decode_float(value):
    # float() also parses the "inf" strings written by _encode
    return None if value is None else float(value)


@dataclass
class DivergenceReport:
    """Diagnostics for one (model, test domain) pair.

    ``level_rmse`` is only filled for epidemic models, where it measures the
    error on infection levels rather than weekly changes.
    """

    model_id: str
    test_domain_id: str
    points: list[DivergencePoint]
    wasserstein_grid: float
    wasserstein_exact: float
    mean_abs_divergence: float
    sizes: list[tuple[float, float]]
    rmse: float
    mae: float
    level_rmse: float | None = None
    n_seeds: int = 1
    n_test: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.alpha)
        self.sizes = sorted(((float(a), float(s)) for a, s in self.sizes), key=lambda t: t[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points"] = [asdict(p) for p in self.points]
        d["sizes"] = [list(s) for s in self.sizes]
        return _encode(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "DivergenceReport":
        points = [DivergencePoint(**{k: _decode_float(v) for k, v in p.items()}) for p in d["points"]]
        return cls(
            model_id=d["model_id"],
            test_domain_id=d["test_domain_id"],
            points=points,
            wasserstein_grid=_decode_float(d["wasserstein_grid"]),
            wasserstein_exact=_decode_float(d["wasserstein_exact"]),
            mean_abs_divergence=_decode_float(d["mean_abs_divergence"]),
            sizes=[(_decode_float(a), _decode_float(s)) for a, s in d["sizes"]],
            rmse=_decode_float(d["rmse"]),
            mae=_decode_float(d["mae"]),
            level_rmse=_decode_float(d.get("level_rmse")),
            n_seeds=int(d.get("n_seeds", 1)),
            n_test=int(d.get("n_test", 0)),
            extras=d.get("extras", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "DivergenceReport":
        return cls.from_dict(json.loads(text))


def mean_abs_divergence(points: Sequence[DivergencePoint]) -> float:
    return math.fsum(abs(p.divergence) for p in points) / len(points)


def build_report(model_id: str, test_domain_id: str, alphas: Sequence[float],
                 dist: WeightedDistribution, test_scores, predictions, truths,
                 raw_sum: bool = False) -> DivergenceReport:
    """Report using one shared weighted distribution for the whole domain."""
    points = divergence_curve(alphas, dist, test_scores)
    rmse, mae = accuracy_metrics(predictions, truths)
    return DivergenceReport(
        model_id=model_id,
        test_domain_id=test_domain_id,
        points=points,
        wasserstein_grid=curve_area(points, raw_sum),
        wasserstein_exact=wasserstein_exact(dist, test_scores),
        mean_abs_divergence=mean_abs_divergence(points),
        sizes=[(p.alpha, 2.0 * p.v_q) for p in points],
        rmse=rmse,
        mae=mae,
        n_test=len(_test_array(test_scores)),
    )


def average_reports(reports: Sequence[DivergenceReport]) -> DivergenceReport:
    """Elementwise mean of reports sharing model, domain and alpha grid."""
    if not reports:
        raise InvalidInputError("nothing to average")
    first = reports[0]
    alphas = [p.alpha for p in first.points]
    for r in reports:
        if [p.alpha for p in r.points] != alphas:
            raise InvalidInputError("reports use different alpha grids")

    def mean(values):
        values = list(values)
        return math.fsum(values) / len(values) if not any(math.isinf(v) for v in values) else INF

    points = []
    for i, a in enumerate(alphas):
        points.append(DivergencePoint.build(
            a,
            mean(r.points[i].v_q for r in reports),
            mean(r.points[i].expected_cov for r in reports),
            mean(r.points[i].exact_cov for r in reports),
        ))
    level = [r.level_rmse for r in reports if r.level_rmse is not None]
    return DivergenceReport(
        model_id=first.model_id,
        test_domain_id=first.test_domain_id,
        points=points,
        wasserstein_grid=mean(r.wasserstein_grid for r in reports),
        wasserstein_exact=mean(r.wasserstein_exact for r in reports),
        mean_abs_divergence=mean(r.mean_abs_divergence for r in reports),
        sizes=[(a, mean(r.sizes[i][1] for r in reports)) for i, a in enumerate(alphas)],
        rmse=mean(r.rmse for r in reports),
        mae=mean(r.mae for r in reports),
        level_rmse=mean(level) if level else None,
        n_seeds=sum(r.n_seeds for r in reports),
        n_test=sum(r.n_test for r in reports),
    )
