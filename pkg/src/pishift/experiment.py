"""End-to-end weighted-CP experiment: fit, calibrate, weight, diagnose, report.

One *unit* is a traffic sensor or an epidemic location. For every seed, unit,
model and test domain the pipeline produces a ``DivergenceReport``; the
per-(model, domain) reports written to disk average those over seeds and
units.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conformal import conformal_score
from .data import (
    EpidemicSeries, SplitSpec, TestDomainSpec, TrafficData, chronological_split,
    load_epidemic_csv, load_traffic_csv, node_samples, partition_test_domains,
)
from .diagnostics import (
    DEFAULT_ALPHAS, DivergencePoint, DivergenceReport, accuracy_metrics, average_reports,
    curve_area, divergence_curve, grid_step, mean_abs_divergence, per_query_curve,
    wasserstein_exact,
)
from .epidemic import (
    EpiParams, delta_I, fit_epidemic, simulate, teacher_forced_samples,
)
from .errors import InvalidInputError
from .synth import synth_epidemic, synth_traffic
from .traffic import DensityBuckets, RdModel, filter_degree2, fit_rd_model
from .weighted import (
    DEFAULT_BANDWIDTHS, DEFAULT_CAP, DEFAULT_FLOOR, ShiftWeights, Standardizer,
    bandwidth_grid_search, kde_fit, likelihood_ratios, weighted_distribution,
)

log = logging.getLogger(__name__)

TRAFFIC_MODELS = {"RD-U": "U", "RD-UQ": "UQ"}
EPIDEMIC_MODELS = {"SIS": "SIS", "SIR": "SIR"}


@dataclass
class ExperimentConfig:
    task: str = "traffic"
    models: list[str] = field(default_factory=list)
    data: str = ""
    output: str = "results"
    train_frac: float = 0.0
    cal_frac: float = 0.0
    test_frac: float = 0.0
    domains: str = ""
    alphas: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    bandwidths: list[float] = field(default_factory=lambda: list(DEFAULT_BANDWIDTHS))
    floor: float = DEFAULT_FLOOR
    cap: float = DEFAULT_CAP
    folds: int = 5
    weighting: str = "per_query"
    raw_sum: bool = False
    step: float = 1e-2
    max_iters: int = 10_000
    tol: float = 1e-9
    k1: float = 0.0
    k2: float = 0.0
    grid_size: int = 51
    seed: int = 0
    n_seeds: int = 1
    n_jobs: int = 1
    n_days: int = 20
    noise_sd: float = 0.5
    shift: float = 1.5
    n_years: int = 20
    epi_noise_sd: float = 0.05
    n_locations: int = 1
    period_weeks: int = 52

    def __post_init__(self):
        if self.task not in ("traffic", "epidemic"):
            raise InvalidInputError(f"unknown task {self.task!r}")
        traffic = self.task == "traffic"
        if not self.models:
            self.models = list(TRAFFIC_MODELS if traffic else EPIDEMIC_MODELS)
        known = TRAFFIC_MODELS if traffic else EPIDEMIC_MODELS
        bad = [m for m in self.models if m not in known]
        if bad:
            raise InvalidInputError(f"models {bad} do not apply to task {self.task}")
        if not (self.train_frac or self.cal_frac or self.test_frac):
            self.train_frac, self.cal_frac, self.test_frac = (
                (0.35, 0.15, 0.5) if traffic else (0.35, 0.35, 0.3))
        if not self.domains:
            self.domains = "hour_of_day" if traffic else "pandemic_interval"
        self.alphas = sorted(float(a) for a in self.alphas)
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise InvalidInputError("alpha grid must lie within (0, 1)")
        grid_step(self.alphas)
        if self.weighting not in ("per_query", "shared"):
            raise InvalidInputError(f"unknown weighting {self.weighting!r}")
        if self.n_seeds < 1:
            raise InvalidInputError("n_seeds must be at least 1")
        self.split  # validates fractions
        TestDomainSpec(self.domains)
        if (self.k1 or self.k2) and not 0 < self.k1 < self.k2:
            raise InvalidInputError("density thresholds need 0 < k1 < k2")

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.cal_frac, self.test_frac)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.n_seeds)]


def _coerce(ftype, text):
    text = text.strip() if isinstance(text, str) else text
    if not isinstance(text, str):
        return text
    if "list" in str(ftype):
        items = [t for t in text.replace(",", " ").split() if t]
        return [float(t) for t in items] if "float" in str(ftype) else items
    if ftype in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidInputError(f"not a boolean: {text!r}")
    for kind in (int, float):
        if ftype in (kind, kind.__name__):
            return kind(text)
    return text


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(ExperimentConfig))


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI file (any section) and apply overrides of the same names."""
    values = {}
    types = {f.name: f.type for f in config_fields()}
    if path:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(path):
            raise InvalidInputError(f"cannot read config {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in types:
                    raise InvalidInputError(f"unknown config key {key!r} in [{section}]")
                values[key] = _coerce(types[key], raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in types:
            raise InvalidInputError(f"unknown config key {key!r}")
        values[key] = _coerce(types[key], raw)
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text for ``cfg``; the output path is left out so files do not depend on it."""
    lines = ["[experiment]"]
    for f in config_fields():
        if f.name == "output":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class UnitData:
    """Calibration and test material for one unit and one model."""

    unit: str
    cal_features: np.ndarray
    cal_scores: np.ndarray
    test_features: np.ndarray
    test_scores: np.ndarray
    test_pred: np.ndarray
    test_truth: np.ndarray
    domains: dict[str, np.ndarray]
    level_error: np.ndarray | None = None
    fitted: dict = field(default_factory=dict)


def _traffic_units(cfg: ExperimentConfig, data: TrafficData, model: str) -> list[UnitData]:
    variant = TRAFFIC_MODELS[model]
    out = []
    for node in filter_degree2(data.graph).nodes:
        s = node_samples(data, node)
        tr, ca, te = chronological_split(len(s), cfg.split)
        train, cal, test = s.subset(tr), s.subset(ca), s.subset(te)
        thresholds = DensityBuckets(cfg.k1, cfg.k2) if cfg.k1 else None
        fitted = fit_rd_model(node, variant, train.design(variant), train.target,
                              train.speed, train.volume, train.up, train.down,
                              thresholds=thresholds, step=cfg.step,
                              max_iters=cfg.max_iters, tol=cfg.tol)
        cal_pred = fitted.predict(cal.design(variant), cal.speed, cal.volume)
        test_pred = fitted.predict(test.design(variant), test.speed, test.volume)
        out.append(UnitData(
            node, cal.design(variant), conformal_score(cal_pred, cal.target),
            test.design(variant), conformal_score(test_pred, test.target),
            test_pred, test.target,
            partition_test_domains(len(test), TestDomainSpec(cfg.domains), test.timestamps),
            fitted={node: fitted.to_dict()},
        ))
    return out


def _epidemic_units(cfg: ExperimentConfig, series: Sequence[EpidemicSeries], model: str) -> list[UnitData]:
    variant = EPIDEMIC_MODELS[model]
    grid = np.linspace(0.0, 1.0, cfg.grid_size)
    out = []
    for s in series:
        t, I_t, cum, dI = teacher_forced_samples(s.counts, s.boundaries)
        tr, ca, te = chronological_split(t.size, cfg.split)
        params = fit_epidemic(variant, I_t[tr], cum[tr], dI[tr], s.population, grid, grid)
        pred = delta_I(params, I_t, cum, s.population)
        feats = np.column_stack([I_t, cum]) if variant == "SIR" else I_t[:, None]
        scores = conformal_score(pred, dI)
        labels = s.interval_labels()[t[te]]
        out.append(UnitData(
            s.location, feats[ca], scores[ca], feats[te], scores[te], pred[te], dI[te],
            partition_test_domains(int(np.size(t[te])), TestDomainSpec(cfg.domains),
                                   s.weeks[t[te]], labels),
            level_error=_level_errors(params, s)[t[te] + 1],
            fitted={s.location: params.to_dict()},
        ))
    return out


def _level_errors(params: EpiParams, s: EpidemicSeries) -> np.ndarray:
    """Free-running simulation error on infection levels, restarted each period."""
    err = np.zeros(s.counts.size)
    edges = s.boundaries + [s.counts.size]
    for a, b in zip(edges[:-1], edges[1:]):
        traj = simulate(params, s.counts[a], s.population, b - a)
        err[a:b] = traj.I - s.counts[a:b]
    return err


def _unit_reports(cfg: ExperimentConfig, model: str, u: UnitData, seed: int) -> list[DivergenceReport]:
    if u.cal_scores.size < max(2, cfg.folds):
        log.warning("unit %s has only %d calibration rows; skipped", u.unit, u.cal_scores.size)
        return []
    scaler = Standardizer.fit(u.cal_features)
    cal_x = scaler.transform(u.cal_features)
    test_x = scaler.transform(u.test_features)
    cal_kde = kde_fit(cal_x, bandwidth_grid_search(cal_x, cfg.bandwidths, cfg.folds, seed))
    reports = []
    for name, idx in u.domains.items():
        if idx.size < max(2, cfg.folds):
            log.info("domain %s of unit %s has %d test rows; skipped", name, u.unit, idx.size)
            continue
        dx = test_x[idx]
        test_kde = kde_fit(dx, bandwidth_grid_search(dx, cfg.bandwidths, cfg.folds, seed))
        cal_w = likelihood_ratios(test_kde, cal_kde, cal_x, cfg.floor, cfg.cap)
        test_w = likelihood_ratios(test_kde, cal_kde, dx, cfg.floor, cfg.cap)
        scores = u.test_scores[idx]
        shared = weighted_distribution(u.cal_scores, ShiftWeights(cal_w, float(np.mean(test_w))))
        if cfg.weighting == "per_query":
            points = per_query_curve(cfg.alphas, u.cal_scores, cal_w, scores, test_w)
        else:
            points = divergence_curve(cfg.alphas, shared, scores)
        rmse, mae = accuracy_metrics(u.test_pred[idx], u.test_truth[idx])
        level = None
        if u.level_error is not None:
            level = float(np.sqrt(np.mean(u.level_error[idx] ** 2)))
        reports.append(DivergenceReport(
            model_id=model, test_domain_id=name, points=points,
            wasserstein_grid=curve_area(points, cfg.raw_sum),
            wasserstein_exact=wasserstein_exact(shared, scores),
            mean_abs_divergence=mean_abs_divergence(points),
            sizes=[(p.alpha, 2.0 * p.v_q) for p in points],
            rmse=rmse, mae=mae, level_rmse=level, n_test=int(idx.size),
            extras={"seed": seed, "unit": u.unit},
        ))
    return reports


def _load_world(cfg: ExperimentConfig, seed: int):
    if cfg.task == "traffic":
        if cfg.data:
            return load_traffic_csv(cfg.data)
        return synth_traffic(seed, cfg.n_days, cfg.noise_sd, cfg.shift)[0]
    if cfg.data:
        return load_epidemic_csv(cfg.data, cfg.period_weeks)
    return synth_epidemic(seed, cfg.n_years, cfg.epi_noise_sd, cfg.n_locations,
                          period_weeks=cfg.period_weeks)[0]


def model_units(cfg: ExperimentConfig, world, model: str) -> list[UnitData]:
    if cfg.task == "traffic":
        return _traffic_units(cfg, world, model)
    return _epidemic_units(cfg, world, model)


def run_seed(cfg: ExperimentConfig, seed: int) -> list[DivergenceReport]:
    world = _load_world(cfg, seed)
    reports = []
    for model in cfg.models:
        for unit in model_units(cfg, world, model):
            reports.extend(_unit_reports(cfg, model, unit, seed))
    return reports


def fit_models(cfg: ExperimentConfig, seed: int | None = None) -> dict[str, dict]:
    """Fitted parameters per model, keyed by unit id."""
    world = _load_world(cfg, cfg.seed if seed is None else seed)
    out = {}
    for model in cfg.models:
        fitted = {}
        for unit in model_units(cfg, world, model):
            fitted.update(unit.fitted)
        out[model] = fitted
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    unit_reports: list[DivergenceReport]
    reports: dict[tuple[str, str], DivergenceReport]


def _unit_key(r: DivergenceReport):
    return (r.model_id, r.test_domain_id, r.extras["seed"], r.extras["unit"])


def aggregate(unit_reports: Sequence[DivergenceReport], models: Sequence[str],
              domains: Sequence[str]) -> dict[tuple[str, str], DivergenceReport]:
    groups = defaultdict(list)
    for r in sorted(unit_reports, key=_unit_key):
        groups[(r.model_id, r.test_domain_id)].append(r)
    out = {}
    for m in models:
        for d in domains:
            if (m, d) not in groups:
                continue
            rs = groups[(m, d)]
            avg = average_reports(rs)
            avg.n_seeds = len({r.extras["seed"] for r in rs})
            avg.extras = {"n_units": len(rs)}
            out[(m, d)] = avg
    return out


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    if cfg.n_jobs > 1 and cfg.n_seeds > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            per_seed = list(pool.map(run_seed, [cfg] * cfg.n_seeds, cfg.seeds))
    else:
        per_seed = [run_seed(cfg, s) for s in cfg.seeds]
    unit_reports = sorted((r for rs in per_seed for r in rs), key=_unit_key)
    if not unit_reports:
        raise InvalidInputError("no unit produced a report; check data size and domains")
    domains = TestDomainSpec(cfg.domains).names()
    return ExperimentResult(cfg, unit_reports, aggregate(unit_reports, cfg.models, domains))


# -- file outputs ---------------------------------------------------------

CURVE_COLUMNS = ["model", "domain", "alpha", "abs_divergence", "size",
                 "seed", "unit", "v_q", "expected_cov", "exact_cov", "divergence"]
UNIT_COLUMNS = ["model", "domain", "seed", "unit", "W_grid", "W_exact", "rmse", "mae",
                "level_rmse", "n_test"]
SUMMARY_COLUMNS = ["model", "domain", "mean_abs_divergence", "W_grid", "W_exact", "rmse", "mae"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _num(text: str):
    return None if text == "" else float(text)


def curve_rows(unit_reports: Sequence[DivergenceReport]) -> list[dict]:
    rows = []
    for r in sorted(unit_reports, key=_unit_key):
        for p in r.points:
            rows.append({
                "model": r.model_id, "domain": r.test_domain_id, "alpha": p.alpha,
                "abs_divergence": abs(p.divergence), "size": 2.0 * p.v_q,
                "seed": r.extras["seed"], "unit": r.extras["unit"], "v_q": p.v_q,
                "expected_cov": p.expected_cov, "exact_cov": p.exact_cov,
                "divergence": p.divergence,
            })
    return rows


def unit_rows(unit_reports: Sequence[DivergenceReport]) -> list[dict]:
    return [{
        "model": r.model_id, "domain": r.test_domain_id, "seed": r.extras["seed"],
        "unit": r.extras["unit"], "W_grid": r.wasserstein_grid, "W_exact": r.wasserstein_exact,
        "rmse": r.rmse, "mae": r.mae, "level_rmse": r.level_rmse, "n_test": r.n_test,
    } for r in sorted(unit_reports, key=_unit_key)]


def read_curve_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "model": rec["model"], "domain": rec["domain"], "alpha": float(rec["alpha"]),
                "abs_divergence": float(rec["abs_divergence"]), "size": float(rec["size"]),
                "seed": int(rec["seed"]), "unit": rec["unit"], "v_q": float(rec["v_q"]),
                "expected_cov": float(rec["expected_cov"]), "exact_cov": float(rec["exact_cov"]),
                "divergence": float(rec["divergence"]),
            })
    return rows


def curve_points(rows: Sequence[dict]) -> dict[tuple, list[DivergencePoint]]:
    """Group curve rows back into per-unit DivergencePoint lists."""
    out = defaultdict(list)
    for row in rows:
        key = (row["model"], row["domain"], row["seed"], row["unit"])
        out[key].append(DivergencePoint(row["alpha"], row["v_q"], row["expected_cov"],
                                        row["exact_cov"], row["divergence"]))
    return out


def read_unit_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "model": rec["model"], "domain": rec["domain"], "seed": int(rec["seed"]),
                "unit": rec["unit"], "W_grid": float(rec["W_grid"]),
                "W_exact": float(rec["W_exact"]), "rmse": float(rec["rmse"]),
                "mae": float(rec["mae"]), "level_rmse": _num(rec["level_rmse"]),
                "n_test": int(rec["n_test"]),
            })
    return rows


def summarize(curve: Sequence[dict], units: Sequence[dict], raw_sum: bool = False) -> list[dict]:
    """Per (model, domain) means over seeds and units.

    ``mean_abs_divergence`` and ``W_grid`` are recomputed from the curve rows;
    the remaining columns come from the per-unit metrics.
    """
    per_unit = curve_points(curve)
    metrics = {(u["model"], u["domain"], u["seed"], u["unit"]): u for u in units}
    groups = defaultdict(list)
    for key in sorted(per_unit, key=lambda k: (k[0], k[1], k[2], k[3])):
        groups[key[:2]].append(key)
    order = []
    for key in groups:
        if key[0] not in order:
            order.append(key[0])

    def mean(values):
        values = list(values)
        return math.fsum(values) / len(values)

    rows = []
    for (model, domain), keys in groups.items():
        pts = [sorted(per_unit[k], key=lambda p: p.alpha) for k in keys]
        rows.append({
            "model": model, "domain": domain,
            "mean_abs_divergence": mean(mean_abs_divergence(p) for p in pts),
            "W_grid": mean(curve_area(p, raw_sum) for p in pts),
            "W_exact": mean(metrics[k]["W_exact"] for k in keys),
            "rmse": mean(metrics[k]["rmse"] for k in keys),
            "mae": mean(metrics[k]["mae"] for k in keys),
        })
    return rows


def _domain_rank(cfg_domains: str):
    names = TestDomainSpec(cfg_domains).names()
    return {n: i for i, n in enumerate(names)}


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def emit_reports(result: ExperimentResult, out_dir) -> list[Path]:
    """Write JSON reports, the divergence curve and the summary; return paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    cfg = result.config
    written = []
    for (model, domain), report in sorted(result.reports.items()):
        path = out / f"report_{model}_{domain}.json"
        path.write_text(report.to_json() + "\n")
        written.append(path)
    curve = curve_rows(result.unit_reports)
    units = unit_rows(result.unit_reports)
    _write_csv(out / "divergence_curve.csv", CURVE_COLUMNS, curve)
    _write_csv(out / "unit_metrics.csv", UNIT_COLUMNS, units)
    write_summary(out, summarize(curve, units, cfg.raw_sum), cfg)
    (out / "config_used.ini").write_text(dump_config(cfg))
    written += [out / n for n in ("divergence_curve.csv", "unit_metrics.csv",
                                  "summary.csv", "config_used.ini")]
    return written


def write_summary(out_dir, rows: Sequence[dict], cfg: ExperimentConfig) -> list[dict]:
    """Write ``summary.csv`` in config order (models, then domains)."""
    rank = _domain_rank(cfg.domains)
    rows = sorted(rows, key=lambda r: (cfg.models.index(r["model"]), rank[r["domain"]]))
    _write_csv(Path(out_dir) / "summary.csv", SUMMARY_COLUMNS, rows)
    return rows


def recompute_summary(out_dir, raw_sum: bool = False) -> list[dict]:
    out = Path(out_dir)
    return summarize(read_curve_csv(out / "divergence_curve.csv"),
                     read_unit_csv(out / "unit_metrics.csv"), raw_sum)


def summary_table(rows: Sequence[dict]) -> str:
    lines = [f"{'model':<8} {'domain':<14} {'mean|D|':>9} {'W_grid':>9} {'W_exact':>9}"]
    for r in rows:
        lines.append(f"{r['model']:<8} {r['domain']:<14} {r['mean_abs_divergence']:>9.4f} "
                     f"{r['W_grid']:>9.4f} {r['W_exact']:>9.4f}")
    return "\n".join(lines)


def comparison_table(result: ExperimentResult) -> str:
    """Plain-text table of mean |D| and W per model, averaged over domains."""
    lines = [f"{'model':<8} {'domains':>7} {'mean|D|':>9} {'W_grid':>9} {'W_exact':>9} {'rmse':>9} {'mae':>9}"]
    for model in result.config.models:
        rs = [r for (m, _), r in sorted(result.reports.items()) if m == model]
        if not rs:
            continue
        avg = lambda vals: math.fsum(vals) / len(rs)
        lines.append(
            f"{model:<8} {len(rs):>7d} "
            f"{avg(r.mean_abs_divergence for r in rs):>9.4f} "
            f"{avg(r.wasserstein_grid for r in rs):>9.4f} "
            f"{avg(r.wasserstein_exact for r in rs):>9.4f} "
            f"{avg(r.rmse for r in rs):>9.4f} {avg(r.mae for r in rs):>9.4f}"
        )
    return "\n".join(lines)


def fitted_json(fitted: dict[str, dict]) -> str:
    return json.dumps(fitted, indent=2, sort_keys=True)
