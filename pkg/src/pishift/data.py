"""CSV ingestion, chronological splits and test-domain partitions."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .epidemic import INTERVALS, default_population, pandemic_split, period_cumsum
from .errors import InvalidInputError, ParseError
from .traffic import SensorGraph

log = logging.getLogger(__name__)

TRAFFIC_HEADER = ["timestamp", "node_id", "upstream_id", "downstream_id", "speed", "volume"]
EPIDEMIC_HEADER = ["week_start", "location_id", "infected_count", "population"]
DEFAULT_STEP = np.timedelta64(300, "s")


@dataclass
class TrafficData:
    """Snapshots on a uniform time grid; missing readings are NaN."""

    timestamps: np.ndarray  # datetime64[s], uniform spacing
    nodes: list[str]
    speed: np.ndarray  # (T, n_nodes)
    volume: np.ndarray
    graph: SensorGraph
    dropped: Counter = field(default_factory=Counter)

    def column(self, node: str) -> int:
        return self.nodes.index(node)


@dataclass
class NodeSamples:
    """Regression rows for one sensor: neighbour differences at t, speed change to t+1."""

    node: str
    up: tuple[str, ...]
    down: tuple[str, ...]
    t: np.ndarray
    timestamps: np.ndarray
    du_up: np.ndarray
    dq_up: np.ndarray
    du_down: np.ndarray
    dq_down: np.ndarray
    speed: np.ndarray
    volume: np.ndarray
    target: np.ndarray

    def __len__(self):
        return self.t.size

    def design(self, variant: str) -> np.ndarray:
        if variant == "UQ":
            return np.hstack([self.du_up, self.dq_up, self.du_down, self.dq_down])
        return np.hstack([self.du_up, self.du_down])

    def subset(self, idx) -> "NodeSamples":
        return NodeSamples(self.node, self.up, self.down, self.t[idx], self.timestamps[idx],
                           self.du_up[idx], self.dq_up[idx], self.du_down[idx], self.dq_down[idx],
                           self.speed[idx], self.volume[idx], self.target[idx])


def _parse_time(text: str, line: int) -> np.datetime64:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise ParseError(f"bad timestamp {text!r}", line) from exc
    # wall-clock time drives hour-of-day domains
    return np.datetime64(ts.replace(tzinfo=None), "s")


def _parse_float(text: str, what: str, line: int) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        return float(text)
    except ValueError as exc:
        raise ParseError(f"bad {what} {text!r}", line) from exc


def _ids(text: str) -> list[str]:
    return [p.strip() for p in text.split(";") if p.strip()]


def load_traffic_csv(path) -> TrafficData:
    """Read the flat traffic schema; one row per (timestamp, node).

    Neighbour columns may hold several ids separated by ``;``. Rows with a
    missing or negative reading are dropped and counted in ``dropped``.
    """
    rows = []
    up = defaultdict(set)
    down = defaultdict(set)
    dropped = Counter()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAFFIC_HEADER:
            raise ParseError(f"expected header {','.join(TRAFFIC_HEADER)}", 1)
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(TRAFFIC_HEADER):
                raise ParseError(f"expected {len(TRAFFIC_HEADER)} fields, got {len(rec)}", line)
            ts = _parse_time(rec[0], line)
            node = rec[1].strip()
            if not node:
                raise ParseError("empty node_id", line)
            for j in _ids(rec[2]):
                up[node].add(j)
                down.setdefault(j, set())
            for j in _ids(rec[3]):
                down[node].add(j)
                up.setdefault(j, set())
            u = _parse_float(rec[4], "speed", line)
            q = _parse_float(rec[5], "volume", line)
            if math.isnan(u) or math.isnan(q):
                dropped["missing"] += 1
                continue
            if u < 0 or q < 0:
                dropped["negative"] += 1
                continue
            rows.append((ts, node, u, q, line))
    for reason, count in dropped.items():
        log.warning("dropped %d traffic rows (%s)", count, reason)

    nodes = sorted(set(up) | set(down) | {r[1] for r in rows})
    graph = SensorGraph({n: tuple(sorted(up[n])) for n in nodes},
                        {n: tuple(sorted(down[n])) for n in nodes})
    if not rows:
        return TrafficData(np.array([], dtype="datetime64[s]"), nodes,
                           np.empty((0, len(nodes))), np.empty((0, len(nodes))), graph, dropped)

    stamps = np.unique(np.array([r[0] for r in rows]))
    gaps = np.diff(stamps)
    step = gaps.min() if gaps.size else DEFAULT_STEP
    t0 = stamps[0]
    n_steps = int((stamps[-1] - t0) // step) + 1
    speed = np.full((n_steps, len(nodes)), np.nan)
    volume = np.full((n_steps, len(nodes)), np.nan)
    col = {n: i for i, n in enumerate(nodes)}
    for ts, node, u, q, line in rows:
        offset = ts - t0
        if offset % step:
            raise ParseError(f"timestamp {ts} is off the {step} grid", line)
        k = int(offset // step)
        if not math.isnan(speed[k, col[node]]):
            raise ParseError(f"duplicate reading for node {node} at {ts}", line)
        speed[k, col[node]] = u
        volume[k, col[node]] = q
    timestamps = t0 + step * np.arange(n_steps)
    return TrafficData(timestamps, nodes, speed, volume, graph, dropped)


def write_traffic_csv(data: TrafficData, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAFFIC_HEADER)
        for k, ts in enumerate(data.timestamps):
            stamp = str(ts.astype("datetime64[s]"))
            for i, node in enumerate(data.nodes):
                u, q = data.speed[k, i], data.volume[k, i]
                if math.isnan(u) or math.isnan(q):
                    continue
                w.writerow([stamp, node, ";".join(data.graph.up(node)),
                            ";".join(data.graph.down(node)), repr(float(u)), repr(float(q))])


def node_samples(data: TrafficData, node: str) -> NodeSamples:
    """Regression rows at ``node``; rows touching a missing reading are skipped."""
    up, down = data.graph.up(node), data.graph.down(node)
    i = data.column(node)
    ju = [data.column(j) for j in up]
    jd = [data.column(j) for j in down]
    u, q = data.speed, data.volume
    T = u.shape[0]
    t = np.arange(max(T - 1, 0))
    cols = [i] + ju + jd
    ok = np.isfinite(u[t + 1, i])
    for c in cols:
        ok &= np.isfinite(u[t, c]) & np.isfinite(q[t, c])
    t = t[ok]
    ui, qi = u[t, i], q[t, i]
    return NodeSamples(
        node, tuple(up), tuple(down), t, data.timestamps[t],
        u[t][:, ju] - ui[:, None], q[t][:, ju] - qi[:, None],
        u[t][:, jd] - ui[:, None], q[t][:, jd] - qi[:, None],
        ui, qi, u[t + 1, i] - ui,
    )


@dataclass
class EpidemicSeries:
    location: str
    weeks: np.ndarray  # datetime64[D]
    counts: np.ndarray
    population: float
    boundaries: list[int]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if np.any(self.counts < 0):
            raise InvalidInputError("infection counts must be nonnegative")
        if np.any(self.counts > self.population):
            raise InvalidInputError(f"counts exceed population in {self.location}")
        b = sorted(set(self.boundaries) | {0})
        if b[-1] >= max(self.counts.size, 1):
            raise InvalidInputError("period boundary beyond the series")
        self.boundaries = b

    def period_of(self) -> np.ndarray:
        """Period index for every week."""
        return np.searchsorted(self.boundaries, np.arange(self.counts.size), side="right") - 1

    def cum_counts(self) -> np.ndarray:
        return period_cumsum(self.counts, self.boundaries)

    def interval_labels(self) -> np.ndarray:
        """Pandemic interval (0-3) per week, computed within each period."""
        labels = np.zeros(self.counts.size, dtype=int)
        edges = self.boundaries + [self.counts.size]
        for a, b in zip(edges[:-1], edges[1:]):
            if self.counts[a:b].sum() > 0:
                labels[a:b] = pandemic_split(self.counts, a, b).labels()
        return labels


def yearly_boundaries(n_weeks: int, period_weeks: int = 52) -> list[int]:
    return list(range(0, max(n_weeks, 1), period_weeks))


def load_epidemic_csv(path, period_weeks: int = 52, population_multiple: float = 10.0) -> list[EpidemicSeries]:
    """Read weekly counts per location. A blank or absent population uses the default rule."""
    by_loc = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        header = [h.strip() for h in header] if header else None
        if header not in (EPIDEMIC_HEADER, EPIDEMIC_HEADER[:3]):
            raise ParseError(f"expected header {','.join(EPIDEMIC_HEADER)}", 1)
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line)
            try:
                week = np.datetime64(datetime.fromisoformat(rec[0].strip()).date(), "D")
            except ValueError as exc:
                raise ParseError(f"bad week_start {rec[0]!r}", line) from exc
            loc = rec[1].strip()
            count = _parse_float(rec[2], "infected_count", line)
            if math.isnan(count) or count < 0 or count != int(count):
                raise ParseError(f"infected_count must be a nonnegative integer, got {rec[2]!r}", line)
            pop = _parse_float(rec[3], "population", line) if len(rec) == 4 else math.nan
            if not math.isnan(pop) and count > pop:
                raise ParseError(f"infected_count {int(count)} exceeds population {pop:g}", line)
            by_loc[loc].append((week, count, pop, line))

    out = []
    for loc in sorted(by_loc):
        recs = sorted(by_loc[loc], key=lambda r: r[0])
        weeks = np.array([r[0] for r in recs])
        if np.any(np.diff(weeks) == np.timedelta64(0, "D")):
            raise ParseError(f"duplicate week for location {loc}", recs[-1][3])
        counts = np.array([r[1] for r in recs])
        pops = [r[2] for r in recs if not math.isnan(r[2])]
        bounds = yearly_boundaries(counts.size, period_weeks)
        if pops:
            population = float(max(pops))
        else:
            population = default_population(counts, bounds, population_multiple)
        out.append(EpidemicSeries(loc, weeks, counts, population, bounds))
    return out


def write_epidemic_csv(series: Sequence[EpidemicSeries], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPIDEMIC_HEADER)
        for s in series:
            for week, c in zip(s.weeks, s.counts):
                w.writerow([str(week), s.location, int(c), repr(float(s.population))])


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    cal_frac: float
    test_frac: float

    def __post_init__(self):
        fr = (self.train_frac, self.cal_frac, self.test_frac)
        if any(not f > 0 for f in fr):
            raise InvalidInputError("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidInputError(f"split fractions sum to {sum(fr)}, not 1")


def chronological_split(n: int, spec: SplitSpec) -> tuple[slice, slice, slice]:
    """Contiguous train, calibration, test blocks; rounding remainder goes to test."""
    n_train = math.floor(n * spec.train_frac + 1e-9)
    n_cal = math.floor(n * spec.cal_frac + 1e-9)
    if n_train < 1 or n_cal < 1 or n - n_train - n_cal < 1:
        raise InvalidInputError(f"{n} rows are too few for split {spec}")
    return slice(0, n_train), slice(n_train, n_train + n_cal), slice(n_train + n_cal, n)


DOMAIN_MODES = ("hour_of_day", "pandemic_interval", "whole")


@dataclass(frozen=True)
class TestDomainSpec:
    mode: str = "whole"

    def __post_init__(self):
        if self.mode not in DOMAIN_MODES:
            raise InvalidInputError(f"unknown test-domain mode {self.mode!r}")

    def names(self) -> list[str]:
        if self.mode == "hour_of_day":
            return [f"h{h:02d}" for h in range(24)]
        if self.mode == "pandemic_interval":
            return list(INTERVALS)
        return ["all"]


def partition_test_domains(n: int, spec: TestDomainSpec, timestamps=None,
                           interval_labels=None) -> dict[str, np.ndarray]:
    """Index sets of the test rows for each named domain (possibly empty)."""
    if spec.mode == "whole":
        return {"all": np.arange(n)}
    if spec.mode == "hour_of_day":
        if timestamps is None:
            raise InvalidInputError("hour-of-day domains need timestamps")
        ts = np.asarray(timestamps).astype("datetime64[s]")
        if ts.size != n:
            raise InvalidInputError("one timestamp per test row required")
        hours = ((ts - ts.astype("datetime64[D]")) // np.timedelta64(1, "h")).astype(int)
        return {f"h{h:02d}": np.flatnonzero(hours == h) for h in range(24)}
    if interval_labels is None:
        raise InvalidInputError("pandemic-interval domains need interval labels")
    labels = np.asarray(interval_labels)
    if labels.size != n:
        raise InvalidInputError("one interval label per test row required")
    return {name: np.flatnonzero(labels == k) for k, name in enumerate(INTERVALS)}
