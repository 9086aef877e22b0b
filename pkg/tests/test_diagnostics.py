import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from pishift.conformal import INF
from pishift.diagnostics import (
    DEFAULT_ALPHAS, DivergencePoint, DivergenceReport, accuracy_metrics, average_reports,
    build_report, coverage_divergence, curve_area, divergence_curve, divergence_point,
    exact_coverage, expected_coverage, grid_step, mean_abs_divergence, per_query_curve,
    prediction_size, wasserstein_exact, wasserstein_grid,
)
from pishift.errors import InvalidInputError
from pishift.weighted import ShiftWeights, WeightedDistribution, weighted_distribution, weighted_quantile

scores_st = st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=25)
weights_st = st.floats(0.05, 20.0)


def unit(scores):
    return weighted_distribution(scores, ShiftWeights(np.ones(len(scores)), 1.0))


def point_mass(c):
    return WeightedDistribution(np.array([float(c)]), np.array([1.0]), 0.0)


def riemann_cdf_area(dist, test, lo, hi, n=400_000):
    """Midpoint-rule area between the renormalized calibration CDF and the test CDF."""
    mid = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    cum = np.concatenate([[0.0], np.cumsum(dist.masses)]) / dist.masses.sum()
    f_cal = cum[np.searchsorted(dist.scores, mid, side="right")]
    f_test = np.searchsorted(np.sort(test), mid, side="right") / len(test)
    return float(np.abs(f_cal - f_test).sum() * (hi - lo) / n)


@st.composite
def dist_and_test(draw):
    scores = draw(scores_st)
    w = draw(st.lists(weights_st, min_size=len(scores), max_size=len(scores)))
    test = draw(scores_st)
    return weighted_distribution(scores, ShiftWeights(w, draw(weights_st))), test


class TestCoverages:
    def test_expected_below_smallest(self):
        d = WeightedDistribution(np.array([1.0, 2.0, 3.0]), np.array([0.3, 0.3, 0.3]), 0.1)
        assert expected_coverage(0.5, d) == 0.0

    def test_expected_cumulative(self):
        d = WeightedDistribution(np.array([1.0, 2.0, 3.0]), np.array([0.3, 0.3, 0.3]), 0.1)
        assert expected_coverage(2.0, d) == pytest.approx(0.6, abs=1e-15)

    def test_expected_rejects_infinite(self):
        with pytest.raises(InvalidInputError):
            expected_coverage(INF, point_mass(1.0))

    @given(dist_and_test(), st.sampled_from(DEFAULT_ALPHAS))
    def test_expected_at_quantile_exceeds_level(self, dt, alpha):
        d, _ = dt
        v_q = weighted_quantile(alpha, d)
        if math.isfinite(v_q):
            assert expected_coverage(v_q, d) >= 1 - alpha - 1e-12

    def test_exact_infinite_quantile(self):
        assert exact_coverage(INF, [1.0, 5.0]) == 1.0

    def test_exact_counting(self):
        assert exact_coverage(2.5, [1, 2, 3, 4]) == 0.5

    def test_exact_empty(self):
        with pytest.raises(InvalidInputError):
            exact_coverage(1.0, [])

    def test_self_consistency(self, rng):
        s = rng.exponential(size=199)
        d = unit(s)
        v_q = weighted_quantile(0.5, d)
        assert abs(expected_coverage(v_q, d) - exact_coverage(v_q, s)) <= 1 / 200 + 1e-12


class TestDivergence:
    def test_identical_bound(self, rng):
        s = rng.exponential(size=150)
        d = unit(s)
        for a in DEFAULT_ALPHAS:
            v_q = weighted_quantile(a, d)
            assert abs(coverage_divergence(v_q, d, s)) <= 1 / 151 + 1 / 150

    def test_disjoint_supports(self):
        d = WeightedDistribution(np.array([1.0, 2.0]), np.array([0.4, 0.4]), 0.2)
        assert coverage_divergence(2.0, d, [10.0, 11.0]) == pytest.approx(0.8)

    def test_both_covered(self):
        assert coverage_divergence(1.0, point_mass(1.0), [0.0]) == 0.0

    @given(dist_and_test(), st.sampled_from(DEFAULT_ALPHAS))
    def test_decomposition_and_bounds(self, dt, alpha):
        d, t = dt
        p = divergence_point(alpha, d, t)
        assert p.divergence == p.expected_cov - p.exact_cov
        assert -1 <= p.divergence <= 1

    def test_infinite_quantile_point(self):
        d = weighted_distribution([1.0], ShiftWeights([1.0], 1.0))
        p = divergence_point(0.1, d, [3.0])
        assert p.v_q == INF and p.exact_cov == 1.0 and p.expected_cov == 0.5

    def test_location_shift_peaks_mid_alpha(self):
        r = np.random.default_rng(0)
        d = unit(np.abs(r.normal(0, 1, 4000)))
        test = np.abs(r.normal(0.5, 1, 4000))
        absd = {p.alpha: abs(p.divergence) for p in divergence_curve(DEFAULT_ALPHAS, d, test)}
        assert absd[0.5] > absd[0.1] and absd[0.5] > absd[0.9]


class TestWasserstein:
    def test_point_masses(self):
        for c in (0.0, 0.25, 3.0, 1e6):
            assert wasserstein_exact(point_mass(0.0), [c]) == c

    def test_identical(self, rng):
        s = rng.exponential(size=50)
        assert wasserstein_exact(unit(s), s) == 0.0

    def test_hand_example(self):
        d = unit([0.0, 1.0])
        assert wasserstein_exact(d, [0.5, 1.5]) == pytest.approx(0.5, abs=1e-15)
        assert riemann_cdf_area(d, [0.5, 1.5], -1.0, 3.0) == pytest.approx(0.5, abs=1e-4)

    def test_empty_support(self):
        d = WeightedDistribution(np.array([]), np.array([]), 1.0)
        with pytest.raises(InvalidInputError):
            wasserstein_exact(d, [1.0])

    @given(dist_and_test())
    def test_matches_scipy(self, dt):
        d, t = dt
        ref = wasserstein_distance(d.scores, t, u_weights=d.masses)
        assert wasserstein_exact(d, t) == pytest.approx(ref, rel=1e-9, abs=1e-9)

    @given(scores_st, scores_st, scores_st)
    def test_metric_axioms(self, a, b, c):
        w = lambda x, y: wasserstein_exact(unit(x), y)
        assert w(a, b) == pytest.approx(w(b, a), rel=1e-9, abs=1e-9)
        assert w(a, c) <= w(a, b) + w(b, c) + 1e-9
        assert w(a, a) == 0.0

    def test_grid_identical_within_bound(self, rng):
        s = rng.exponential(size=100)
        assert wasserstein_grid(DEFAULT_ALPHAS, unit(s), s) <= (1 / 101 + 1 / 100) * 0.9

    def test_grid_step_scaling(self):
        d = unit([0.0, 1.0, 2.0, 3.0])
        test = [5.0, 6.0]
        weighted = wasserstein_grid(DEFAULT_ALPHAS, d, test)
        raw = wasserstein_grid(DEFAULT_ALPHAS, d, test, raw_sum=True)
        assert weighted == pytest.approx(raw * 0.1)

    def test_grid_requires_sorted_and_even(self):
        d = unit([1.0, 2.0])
        with pytest.raises(InvalidInputError):
            wasserstein_grid([0.5, 0.1], d, [1.0])
        with pytest.raises(InvalidInputError):
            grid_step([0.1, 0.2, 0.5])
        assert grid_step([0.3]) == 1.0


class TestSizesAndAccuracy:
    def test_infinite_size(self):
        assert prediction_size(0.05, unit([1, 2, 3, 4])) == INF

    def test_finite_size(self):
        assert prediction_size(0.5, unit([1, 2, 3, 4])) == 6.0

    @given(dist_and_test())
    def test_size_nonincreasing(self, dt):
        d, _ = dt
        sizes = [prediction_size(a, d) for a in DEFAULT_ALPHAS]
        assert all(x >= y for x, y in zip(sizes, sizes[1:]))

    def test_perfect(self):
        assert accuracy_metrics([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)

    def test_hand_residuals(self):
        rmse, mae = accuracy_metrics([3.0, -4.0], [0.0, 0.0])
        assert rmse == pytest.approx(3.5355339059327378, rel=1e-15)
        assert mae == 3.5

    def test_mismatch(self):
        with pytest.raises(InvalidInputError):
            accuracy_metrics([1.0], [1.0, 2.0])

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
    def test_rmse_at_least_mae(self, pairs):
        p, y = zip(*pairs)
        rmse, mae = accuracy_metrics(p, y)
        assert rmse >= mae - 1e-9


class TestPerQueryCurve:
    def test_equal_weights_match_shared(self, rng):
        cal = rng.exponential(size=40)
        test = rng.exponential(size=15)
        shared = weighted_distribution(cal, ShiftWeights(np.ones(40), 1.0))
        pq = per_query_curve(DEFAULT_ALPHAS, cal, np.ones(40), test, np.ones(15))
        for a, b in zip(pq, divergence_curve(DEFAULT_ALPHAS, shared, test)):
            assert a.v_q == pytest.approx(b.v_q, rel=1e-12)
            assert a.expected_cov == pytest.approx(b.expected_cov, abs=1e-12)
            assert a.exact_cov == b.exact_cov

    def test_weight_count_mismatch(self):
        with pytest.raises(InvalidInputError):
            per_query_curve([0.5], [1.0, 2.0], [1.0, 1.0], [1.0, 2.0], [1.0])


def _report(rng, **kw):
    d = unit(rng.exponential(size=30))
    test = rng.exponential(1.5, size=20)
    return build_report("M", "h01", DEFAULT_ALPHAS, d, test, rng.normal(size=20), rng.normal(size=20), **kw)


class TestReport:
    def test_fields(self, rng):
        r = _report(rng)
        assert [p.alpha for p in r.points] == list(DEFAULT_ALPHAS)
        assert r.wasserstein_grid == pytest.approx(curve_area(r.points))
        assert r.mean_abs_divergence == pytest.approx(mean_abs_divergence(r.points))
        assert r.n_test == 20 and r.wasserstein_exact >= 0

    def test_json_round_trip(self, rng):
        r = _report(rng)
        r.points[0] = DivergencePoint.build(0.1, INF, 0.9, 1.0)
        r.sizes[0] = (0.1, INF)
        r.level_rmse = 3.5
        text = r.to_json()
        assert json.loads(text)["points"][0]["v_q"] == "inf"
        back = DivergenceReport.from_json(text)
        assert back == r

    def test_json_keys(self, rng):
        keys = set(json.loads(_report(rng).to_json()))
        assert {"model_id", "test_domain_id", "points", "wasserstein_grid", "wasserstein_exact",
                "mean_abs_divergence", "sizes", "rmse", "mae"} <= keys

    def test_average(self, rng):
        a, b = _report(rng), _report(rng)
        avg = average_reports([a, b])
        assert avg.rmse == pytest.approx((a.rmse + b.rmse) / 2)
        assert avg.points[4].divergence == pytest.approx(
            (a.points[4].divergence + b.points[4].divergence) / 2)

    def test_average_rejects_mixed_grids(self, rng):
        a = _report(rng)
        d = unit([1.0, 2.0, 3.0])
        b = build_report("M", "h01", [0.2, 0.4], d, [1.0], [0.0], [0.0])
        with pytest.raises(InvalidInputError):
            average_reports([a, b])
