"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting.
"""
import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from pishift.cli import main
from pishift.conformal import augmented_quantile
from pishift.data import node_samples
from pishift.diagnostics import DEFAULT_ALPHAS, divergence_curve, wasserstein_exact, wasserstein_grid
from pishift.epidemic import (
    PANDEMIC_THRESHOLDS, EpiParams, fit_epidemic, pandemic_split, simulate, sir_delta_I,
    sis_delta_I, teacher_forced_samples,
)
from pishift.experiment import ExperimentConfig, run_experiment
from pishift.synth import synth_epidemic, synth_traffic
from pishift.traffic import fit_rd, rd_loss_grad
from pishift.weighted import (
    ShiftWeights, Standardizer, WeightedDistribution, bandwidth_grid_search, kde_fit,
    likelihood_ratios, per_query_quantiles, weighted_distribution, weighted_quantile,
)

ALPHAS = DEFAULT_ALPHAS


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


# -- 1: exchangeable coverage -------------------------------------------------

def test_criterion_1_exchangeable_coverage(verdict):
    def run():
        cov = {a: [] for a in ALPHAS}
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.uniform(-2, 2, 4000)
            y = 1.5 * x + (0.5 + 0.3 * np.abs(x)) * rng.standard_normal(4000)
            scores = np.abs(y - 1.5 * x)
            cal, test = scores[:2000], scores[2000:]
            for a in ALPHAS:
                cov[a].append(np.mean(test <= augmented_quantile(a, cal)))
        return {a: float(np.mean(v)) for a, v in cov.items()}

    cov, secs = _timed(run)
    ok = all((1 - a) - 0.02 <= cov[a] <= (1 - a) + 0.03 for a in ALPHAS) and secs < 10
    worst = max(ALPHAS, key=lambda a: abs(cov[a] - (1 - a)))
    assert verdict(1, ok, f"coverage within [-0.02, +0.03] at all 9 alphas; worst alpha={worst} "
                          f"cov={cov[worst]:.4f}; {secs:.2f}s"), cov


# -- 2: weighted correction under covariate shift -----------------------------

MU_TEST = 1.0


def _noise_scale(x):
    return 0.2 + np.abs(x)


def _population_coverage(q, mu):
    """P(|Y| <= q) when X ~ N(mu, 1) and |Y| = s(X)|eps|."""
    f = lambda x: (2 * stats.norm.cdf(q / _noise_scale(x)) - 1) * stats.norm.pdf(x - mu)
    return integrate.quad(f, -12, 12, limit=200)[0]


def test_criterion_2_weighted_correction(verdict):
    # oracle first: the unweighted population quantile undercovers the shifted test law
    oracle = {}
    for a in (0.1, 0.5):
        q = optimize.brentq(lambda v: _population_coverage(v, 0.0) - (1 - a), 1e-6, 50)
        oracle[a] = _population_coverage(q, MU_TEST) - (1 - a)
    assert all(abs(d) >= 0.05 for d in oracle.values())

    def run():
        dev = {a: ([], []) for a in (0.1, 0.5)}
        for seed in range(20):
            rng = np.random.default_rng(seed)
            xc = rng.normal(0, 1, 1000)
            xt = rng.normal(MU_TEST, 1, 1000)
            vc = _noise_scale(xc) * np.abs(rng.standard_normal(1000))
            vt = _noise_scale(xt) * np.abs(rng.standard_normal(1000))
            scaler = Standardizer.fit(xc)
            c, t = scaler.transform(xc), scaler.transform(xt)
            cal_kde = kde_fit(c, bandwidth_grid_search(c, seed=seed))
            test_kde = kde_fit(t, bandwidth_grid_search(t, seed=seed))
            cw = likelihood_ratios(test_kde, cal_kde, c)
            tw = likelihood_ratios(test_kde, cal_kde, t)
            for a, (weighted, plain) in dev.items():
                v_q, _ = per_query_quantiles(a, vc, cw, tw)
                weighted.append(np.mean(vt <= v_q) - (1 - a))
                plain.append(np.mean(vt <= augmented_quantile(a, vc)) - (1 - a))
        return dev

    dev, secs = _timed(run)
    w = {a: float(np.mean(np.abs(d[0]))) for a, d in dev.items()}
    u = {a: float(np.mean(np.abs(d[1]))) for a, d in dev.items()}
    ok = all(w[a] <= 0.03 and u[a] >= 0.05 for a in w) and secs < 30
    for a in u:
        # the sampled unweighted run agrees with the oracle
        assert abs(float(np.mean(dev[a][1])) - oracle[a]) < 0.02
    assert verdict(2, ok, "weighted mean|dev| " + ", ".join(f"a={a}: {w[a]:.4f}" for a in w)
                   + "; unweighted " + ", ".join(f"a={a}: {u[a]:.4f}" for a in u)
                   + f"; {secs:.1f}s"), (w, u)


# -- 3 and 4: synthetic worlds ------------------------------------------------

@pytest.fixture(scope="module")
def traffic_runs():
    return _timed(lambda: run_experiment(ExperimentConfig(task="traffic", n_seeds=10)))


@pytest.fixture(scope="module")
def epidemic_runs():
    return _timed(lambda: run_experiment(ExperimentConfig(task="epidemic", n_seeds=10)))


def _wins(result, better, worse):
    domains = sorted({d for _, d in result.reports})
    w = {m: np.array([result.reports[(m, d)].wasserstein_grid for d in domains]) for m in (better, worse)}
    return int(np.sum(w[better] < w[worse])), len(domains), float(w[better].mean()), float(w[worse].mean())


@pytest.mark.slow
def test_criterion_3_physics_model_wins(verdict, traffic_runs, epidemic_runs):
    (traffic, t_secs), (epidemic, e_secs) = traffic_runs, epidemic_runs
    tw, tn, t_uq, t_u = _wins(traffic, "RD-UQ", "RD-U")
    ew, en, e_sir, e_sis = _wins(epidemic, "SIR", "SIS")
    ok = tw >= 20 and t_uq < t_u and ew >= 3 and t_secs + e_secs < 300
    assert verdict(3, ok, f"RD-UQ<RD-U on {tw}/{tn} hours (W {t_uq:.4f} vs {t_u:.4f}); "
                          f"SIR<SIS on {ew}/{en} intervals (W {e_sir:.4f} vs {e_sis:.4f}); "
                          f"{t_secs + e_secs:.0f}s")


def _mean_abs_by_alpha(result, model):
    out = {}
    for a in ALPHAS:
        vals = [abs(p.divergence) for r in result.unit_reports if r.model_id == model
                for p in r.points if p.alpha == a]
        out[a] = float(np.mean(vals))
    return out


@pytest.mark.slow
def test_criterion_4_rise_and_fall(verdict, traffic_runs, epidemic_runs):
    parts, ok = [], True
    for (result, _), model in ((traffic_runs, "RD-U"), (epidemic_runs, "SIS")):
        d = _mean_abs_by_alpha(result, model)
        ok &= d[0.5] > d[0.1] and d[0.5] > d[0.9]
        parts.append(f"{model} |D| a=0.1/0.5/0.9: {d[0.1]:.4f}/{d[0.5]:.4f}/{d[0.9]:.4f}")
    assert verdict(4, ok, "; ".join(parts))


# -- 5: quantile oracles -------------------------------------------------------

def _oracle_augmented(alpha, scores):
    n = len(scores)
    need = (1 - alpha) * (n + 1)
    for v in sorted(scores):
        if sum(1 for s in scores if s <= v) >= need:
            return float(v)
    return math.inf


def _oracle_weighted(alpha, scores, weights, test_weight):
    total = sum(weights) + test_weight
    need = 1 - alpha
    for v in sorted(set(scores)):
        if Fraction(sum(w for s, w in zip(scores, weights) if s <= v), total) >= need:
            return float(v)
    return math.inf


def test_criterion_5_quantile_oracles(verdict):
    alphas = [Fraction(k, 100) for k in range(1, 100)]
    patterns = [lambda i: 1, lambda i: 1 + i % 3, lambda i: 4 - i % 4]
    test_weights = [1, 2, 5]
    checked = mismatches = 0
    for size in range(1, 9):
        for ms in itertools.combinations_with_replacement(range(4), size):
            dists = []
            for pat, tw in zip(patterns, test_weights):
                w = [pat(i) for i in range(size)]
                dists.append((w, tw, weighted_distribution(list(ms), ShiftWeights(w, tw))))
            for a in alphas:
                fa = float(a)
                checked += 1
                mismatches += augmented_quantile(fa, ms) != _oracle_augmented(a, ms)
                for w, tw, dist in dists:
                    checked += 1
                    mismatches += weighted_quantile(fa, dist) != _oracle_weighted(a, ms, w, tw)
    assert verdict(5, mismatches == 0, f"{mismatches} mismatches in {checked} quantile checks "
                                       "(multisets of size 1-8 over {0,1,2,3}, 99 alphas)")


# -- 6: Wasserstein suite ------------------------------------------------------

def _random_instance(rng):
    n = int(rng.integers(5, 300))
    m = int(rng.integers(5, 300))
    cal = rng.gamma(rng.uniform(0.5, 3), rng.uniform(0.5, 2), n)
    test = rng.gamma(rng.uniform(0.5, 3), rng.uniform(0.5, 2), m)
    w = rng.uniform(0.2, 3.0, n)
    return weighted_distribution(cal, ShiftWeights(w, float(rng.uniform(0.2, 3.0)))), test


FINE_ALPHAS = [k / 1000 for k in range(1, 1000)]


def test_criterion_6_exact_estimator(verdict):
    cs = [0.0, 0.5, 1.0, 3.25, 1e6]
    point = all(wasserstein_exact(WeightedDistribution.from_atoms([0.0], [1.0], 0.0), [c]) == c for c in cs)
    rng = np.random.default_rng(6)
    same = True
    for _ in range(100):
        s = rng.integers(0, 20, int(rng.integers(1, 50))).astype(float)
        dist = weighted_distribution(s, ShiftWeights(np.ones(s.size), 1.0))
        same &= wasserstein_exact(dist, s) == 0.0
    assert verdict("6a", point and same, "W_exact(delta_0, delta_c) == c for c in "
                                         f"{cs}; zero on 100 identical multisets")


@pytest.mark.xfail(strict=True, reason="the alpha-axis grid sum and the score-axis area "
                                       "measure different quantities")
def test_criterion_6_grid_matches_exact(verdict):
    rng = np.random.default_rng(60)
    rel = []
    for _ in range(100):
        dist, test = _random_instance(rng)
        exact = wasserstein_exact(dist, test)
        grid = wasserstein_grid(FINE_ALPHAS, dist, test)
        rel.append(abs(grid - exact) / exact)
    rel = np.array(rel)
    ok = bool(np.all(rel <= 0.01))
    verdict("6b", ok, f"grid within 1% of exact on {int(np.sum(rel <= 0.01))}/100 instances "
                      f"(median rel err {np.median(rel):.2f}); expected to fail, see notes")
    assert ok


def _alpha_axis_area(dist, test):
    """Closed-form integral of |D(alpha)| over (0, 1) for a step-function quantile."""
    t = np.sort(test)
    cum = np.cumsum(dist.masses)
    prev = np.concatenate([[0.0], cum[:-1]])
    exact_cov = np.searchsorted(t, dist.scores, side="right") / t.size
    area = math.fsum(np.abs(cum - exact_cov) * (cum - prev))
    return area + dist.infinity_mass * dist.infinity_mass


def test_grid_sum_tracks_alpha_axis_area():
    rng = np.random.default_rng(61)
    for _ in range(100):
        dist, test = _random_instance(rng)
        grid = wasserstein_grid(FINE_ALPHAS, dist, test)
        assert grid == pytest.approx(_alpha_axis_area(dist, test), abs=3e-3)


def test_grid_and_exact_differ_on_point_masses():
    dist = WeightedDistribution.from_atoms([0.0], [1.0], 0.0)
    assert wasserstein_exact(dist, [7.0]) == 7.0
    assert wasserstein_grid(ALPHAS, dist, [7.0]) == pytest.approx(0.9)


# -- 7: physics models ---------------------------------------------------------

def test_criterion_7_physics_models(verdict):
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 4))
    y = rng.normal(size=40)
    worst = 0.0
    for _ in range(100):
        theta = rng.normal(0, 0.7, 6)
        _, g = rd_loss_grad(theta, X, y, 2)
        fd = np.array([(rd_loss_grad(theta + e, X, y, 2)[0] - rd_loss_grad(theta - e, X, y, 2)[0]) / 2e-6
                       for e in np.eye(6) * 1e-6])
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))

    data, truth = synth_traffic(seed=0, n_days=6, noise_sd=0.0)
    s = node_samples(data, "b")
    got = fit_rd("UQ", s.design("UQ"), s.target, s.up, s.down).params.to_vector()
    rd_err = float(np.max(np.abs(got - truth.to_vector()) / np.abs(truth.to_vector())))

    (series,), epi_truth = synth_epidemic(seed=0, noise_sd=0.0)
    _, I, cum, dI = teacher_forced_samples(series.counts, series.boundaries)
    epi_exact = fit_epidemic("SIR", I, cum, dI, series.population) == epi_truth

    conserve = 0.0
    for k in range(50):
        p = EpiParams("SIR", *rng.uniform(0, 1, 2))
        n = float(rng.uniform(100, 1e6))
        traj = simulate(p, rng.uniform(0, 0.1) * n, n, 104, boundaries=[0, 52])
        conserve = max(conserve, float(np.max(np.abs(traj.S + traj.I + traj.R - n)) / n))

    I_grid = rng.uniform(0, 1000, 500)
    reduce_ok = all(
        sir_delta_I(i, 0.0, 1000.0, EpiParams("SIR", b, g)) == sis_delta_I(i, 1000.0, EpiParams("SIS", b, g))
        for i, b, g in zip(I_grid, rng.uniform(0, 1, 500), rng.uniform(0, 1, 500)))

    ok = worst < 1e-4 and rd_err < 1e-2 and epi_exact and conserve <= 1e-9 and reduce_ok
    assert verdict(7, ok, f"grad rel err {worst:.1e}; RD-UQ recovery rel err {rd_err:.1e}; "
                          f"(beta, gamma) exact={epi_exact}; conservation {conserve:.1e}; "
                          f"SIR->SIS identity={reduce_ok}")


# -- 8: pandemic split ---------------------------------------------------------

def test_criterion_8_pandemic_split(verdict):
    iv = pandemic_split(np.ones(100))
    ok = (iv.t1, iv.t2, iv.t3) == (5, 50, 95) and PANDEMIC_THRESHOLDS == (0.05, 0.5, 0.95)
    assert verdict(8, ok, f"t1={iv.t1} t2={iv.t2} t3={iv.t3}; thresholds {PANDEMIC_THRESHOLDS}")


# -- 9: determinism ------------------------------------------------------------

@pytest.mark.parametrize("flags", [["--task", "traffic", "--n_days", "4", "--n_seeds", "2"],
                                   ["--task", "epidemic", "--n_seeds", "3"]],
                         ids=["traffic", "epidemic"])
def test_criterion_9_byte_identical_reruns(verdict, tmp_path, flags, capsys):
    dirs = [tmp_path / "first", tmp_path / "second"]
    for d in dirs:
        assert main(["run", *flags, "--output", str(d)]) == 0
    names = sorted(p.name for p in dirs[0].iterdir())
    same = names == sorted(p.name for p in dirs[1].iterdir()) and all(
        (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names)
    assert verdict(9, same, f"{flags[1]}: {len(names)} files byte-identical across two runs")
