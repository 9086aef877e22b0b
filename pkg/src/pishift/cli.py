"""Command-line entry point.

Subcommands run the pipeline stage by stage::

    pishift synth --task traffic --output data/
    pishift fit --config exp.ini
    pishift run --config exp.ini --n_seeds 10
    pishift report --output results/

Every ``ExperimentConfig`` field is also a flag (``--n_seeds`` or ``--n-seeds``)
that overrides the config file. Exit codes: 0 success, 1 experiment failure,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import write_epidemic_csv, write_traffic_csv
from .errors import InvalidInputError
from .experiment import (
    ExperimentConfig, config_fields, comparison_table, emit_reports, fit_models,
    fitted_json, load_config, recompute_summary, run_experiment, summary_table,
    write_summary,
)
from .synth import synth_epidemic, synth_traffic

log = logging.getLogger("pishift")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_HELP = {
    "task": "traffic or epidemic",
    "models": "comma-separated model ids (RD-U, RD-UQ or SIS, SIR)",
    "data": "input CSV; empty means generate a synthetic world per seed",
    "output": "output directory",
    "train_frac": "chronological train fraction",
    "cal_frac": "chronological calibration fraction",
    "test_frac": "chronological test fraction",
    "domains": "hour_of_day, pandemic_interval or whole",
    "alphas": "evenly spaced alpha grid, comma-separated",
    "bandwidths": "KDE bandwidth grid (standardized units)",
    "floor": "calibration density floor",
    "cap": "likelihood-ratio cap",
    "folds": "cross-validation folds for bandwidth search",
    "weighting": "per_query (one quantile per test point) or shared",
    "raw_sum": "sum |D| over the grid instead of weighting by the step",
    "step": "gradient-descent step size (RD models)",
    "max_iters": "gradient-descent iteration limit",
    "tol": "stop when the loss improves by less than this",
    "k1": "density threshold between low and medium buckets (0 = tertiles)",
    "k2": "density threshold between medium and high buckets",
    "grid_size": "points per axis of the (beta, gamma) grid",
    "seed": "first seed",
    "n_seeds": "number of consecutive seeds to average",
    "n_jobs": "worker processes across seeds",
    "n_days": "synthetic traffic days",
    "noise_sd": "synthetic traffic speed noise",
    "shift": "synthetic ramp-flow strength",
    "n_years": "synthetic epidemic seasons",
    "epi_noise_sd": "synthetic log-scale count noise",
    "n_locations": "synthetic epidemic locations",
    "period_weeks": "weeks per epidemic period",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with experiment settings")
    group = p.add_argument_group("experiment settings (override the config file)")
    for f in config_fields():
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        kwargs = {"dest": f.name, "default": None, "metavar": f.name.upper(),
                  "help": _HELP.get(f.name, "")}
        if f.type in (bool, "bool"):
            kwargs.update(nargs="?", const="true", metavar="BOOL")
        group.add_argument(*flags, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pishift", description="Coverage-divergence diagnostics for weighted conformal prediction.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress (-vv for debug detail)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    specs = {
        "synth": "generate a synthetic dataset CSV",
        "fit": "fit the models only and write their parameters",
        "run": "full pipeline: fit, calibrate, weight, diagnose, report",
        "report": "recompute summary.csv from the curve and unit CSVs",
    }
    for name, text in specs.items():
        p = sub.add_parser(name, help=text, description=text)
        _add_config_flags(p)
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in config_fields()}
    return load_config(args.config, overrides)


def cmd_synth(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.task == "traffic":
        data, truth = synth_traffic(cfg.seed, cfg.n_days, cfg.noise_sd, cfg.shift)
        path = out / "traffic.csv"
        write_traffic_csv(data, path)
        truth_dict = {"b": truth.to_dict()}
    else:
        series, truth = synth_epidemic(cfg.seed, cfg.n_years, cfg.epi_noise_sd,
                                       cfg.n_locations, period_weeks=cfg.period_weeks)
        path = out / "epidemic.csv"
        write_epidemic_csv(series, path)
        truth_dict = {s.location: truth.to_dict() for s in series}
    (out / "truth.json").write_text(json.dumps(truth_dict, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_fit(cfg: ExperimentConfig) -> int:
    text = fitted_json(fit_models(cfg))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fitted.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig) -> int:
    result = run_experiment(cfg)
    emit_reports(result, cfg.output)
    print(comparison_table(result))
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output)
    used = out / "config_used.ini"
    if args.config is None and used.exists():
        overrides = {f.name: getattr(args, f.name) for f in config_fields()}
        cfg = load_config(used, overrides)
    rows = write_summary(out, recompute_summary(out, cfg.raw_sum), cfg)
    print(summary_table(rows))
    return EXIT_OK


def _mark_failed(cfg: ExperimentConfig | None, exc: BaseException) -> None:
    if cfg is None:
        return
    try:
        out = Path(cfg.output)
        if out.is_dir():
            (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
    except OSError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (InvalidInputError, ValueError) as exc:
        print(f"pishift: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_report(cfg, args)
    except Exception as exc:  # any stage failure
        if args.command != "report":
            _mark_failed(cfg, exc)
        print(f"pishift: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
