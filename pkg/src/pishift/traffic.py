"""Reaction-diffusion predictors of traffic speed change at a sensor.

Upstream neighbours act linearly (diffusion), downstream neighbours act
through a saturating ``tanh`` (reaction). The speed-only model (``U``) uses
speed differences; the speed-volume model (``UQ``) adds volume differences and
is trained separately per traffic-density bucket.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import FitFailure, InvalidInputError

log = logging.getLogger(__name__)

VARIANTS = ("U", "UQ")
BUCKETS = ("low", "medium", "high")


@dataclass(frozen=True)
class SensorGraph:
    """Directed sensor network; ``upstream`` feeds diffusion, ``downstream`` reaction."""

    upstream: Mapping[str, tuple[str, ...]]
    downstream: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        for node in set(self.upstream) | set(self.downstream):
            up = set(self.upstream.get(node, ()))
            down = set(self.downstream.get(node, ()))
            if node in up or node in down:
                raise InvalidInputError(f"node {node} lists itself as a neighbour")

    @property
    def nodes(self) -> list[str]:
        return sorted(set(self.upstream) | set(self.downstream))

    def up(self, node: str) -> tuple[str, ...]:
        return tuple(self.upstream.get(node, ()))

    def down(self, node: str) -> tuple[str, ...]:
        return tuple(self.downstream.get(node, ()))

    @classmethod
    def from_edges(cls, nodes: Sequence[str], edges: Sequence[tuple[str, str]]) -> "SensorGraph":
        """Build from directed flow edges ``(a, b)`` meaning traffic moves a -> b."""
        up = {n: [] for n in nodes}
        down = {n: [] for n in nodes}
        for a, b in edges:
            up.setdefault(b, []).append(a)
            down.setdefault(a, []).append(b)
            up.setdefault(a, [])
            down.setdefault(b, [])
        return cls({k: tuple(sorted(set(v))) for k, v in up.items()},
                   {k: tuple(sorted(set(v))) for k, v in down.items()})


def filter_degree2(graph: SensorGraph) -> SensorGraph:
    """Keep nodes with exactly one upstream and one downstream neighbour."""
    keep = [n for n in graph.nodes if len(graph.up(n)) == 1 and len(graph.down(n)) == 1]
    return SensorGraph({n: graph.up(n) for n in keep}, {n: graph.down(n) for n in keep})


@dataclass
class RdParams:
    """Coefficients of one reaction-diffusion model at one sensor.

    Dictionaries are keyed by neighbour id. Volume coefficients stay empty for
    the speed-only variant.
    """

    variant: str
    rho_u: dict[str, float]
    sigma_u: dict[str, float]
    d: float = 0.0
    r: float = 0.0
    rho_q: dict[str, float] = field(default_factory=dict)
    sigma_q: dict[str, float] = field(default_factory=dict)
    bucket: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")
        if self.variant == "UQ":
            if set(self.rho_q) != set(self.rho_u) or set(self.sigma_q) != set(self.sigma_u):
                raise InvalidInputError("UQ params need volume coefficients for every neighbour")
        elif self.rho_q or self.sigma_q:
            raise InvalidInputError("U params cannot carry volume coefficients")

    @property
    def up_ids(self) -> list[str]:
        return sorted(self.rho_u)

    @property
    def down_ids(self) -> list[str]:
        return sorted(self.sigma_u)

    @property
    def n_params(self) -> int:
        k = len(self.rho_u) + len(self.sigma_u)
        return (2 * k if self.variant == "UQ" else k) + 2

    def to_vector(self) -> np.ndarray:
        up, down = self.up_ids, self.down_ids
        parts = [self.rho_u[j] for j in up]
        if self.variant == "UQ":
            parts += [self.rho_q[j] for j in up]
        parts += [self.sigma_u[j] for j in down]
        if self.variant == "UQ":
            parts += [self.sigma_q[j] for j in down]
        return np.array(parts + [self.d, self.r], dtype=float)

    @classmethod
    def from_vector(cls, variant: str, up: Sequence[str], down: Sequence[str],
                    theta, bucket: str | None = None) -> "RdParams":
        theta = [float(v) for v in theta]
        up, down = sorted(up), sorted(down)
        it = iter(theta)
        rho_u = {j: next(it) for j in up}
        rho_q = {j: next(it) for j in up} if variant == "UQ" else {}
        sigma_u = {j: next(it) for j in down}
        sigma_q = {j: next(it) for j in down} if variant == "UQ" else {}
        d, r = next(it), next(it)
        return cls(variant, rho_u, sigma_u, d, r, rho_q, sigma_q, bucket)

    @classmethod
    def zeros(cls, variant: str, up: Sequence[str], down: Sequence[str]) -> "RdParams":
        k = len(up) + len(down)
        n = (2 * k if variant == "UQ" else k) + 2
        return cls.from_vector(variant, up, down, np.zeros(n))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "bucket": self.bucket,
            "rho_u": self.rho_u, "rho_q": self.rho_q,
            "sigma_u": self.sigma_u, "sigma_q": self.sigma_q,
            "d": self.d, "r": self.r,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RdParams":
        return cls(d["variant"], dict(d["rho_u"]), dict(d["sigma_u"]), float(d["d"]),
                   float(d["r"]), dict(d.get("rho_q", {})), dict(d.get("sigma_q", {})),
                   d.get("bucket"))


def _delta(deltas: Mapping[str, float], ids: Sequence[str], what: str) -> np.ndarray:
    missing = [j for j in ids if j not in deltas]
    if missing:
        raise InvalidInputError(f"missing {what} delta for neighbours {missing}")
    return np.array([deltas[j] for j in ids], dtype=float)


def rd_u_predict(params: RdParams, du: Mapping[str, float]) -> float:
    """Speed change from neighbour speed differences ``u_j - u_i``."""
    if params.variant != "U":
        raise InvalidInputError("rd_u_predict needs U params")
    up, down = params.up_ids, params.down_ids
    diffusion = float(np.dot([params.rho_u[j] for j in up], _delta(du, up, "speed")))
    reaction = float(np.dot([params.sigma_u[j] for j in down], _delta(du, down, "speed")))
    return diffusion + params.d + math.tanh(reaction + params.r)


def rd_uq_predict(params: RdParams, du: Mapping[str, float], dq: Mapping[str, float]) -> float:
    """Speed change from neighbour speed and volume differences."""
    if params.variant != "UQ":
        raise InvalidInputError("rd_uq_predict needs UQ params")
    up, down = params.up_ids, params.down_ids
    diffusion = (np.dot([params.rho_u[j] for j in up], _delta(du, up, "speed"))
                 + np.dot([params.rho_q[j] for j in up], _delta(dq, up, "volume")))
    reaction = (np.dot([params.sigma_u[j] for j in down], _delta(du, down, "speed"))
                + np.dot([params.sigma_q[j] for j in down], _delta(dq, down, "volume")))
    return float(diffusion) + params.d + math.tanh(float(reaction) + params.r)


# Design-matrix form. Columns are [diffusion regressors | reaction regressors];
# theta is [diffusion coefs | reaction coefs | d | r], in the same order as
# RdParams.to_vector.

def feature_layout(variant: str, up: Sequence[str], down: Sequence[str]) -> tuple[int, int]:
    per = 2 if variant == "UQ" else 1
    return per * len(up), per * len(down)


def rd_predict_matrix(theta: np.ndarray, X: np.ndarray, n_diff: int) -> np.ndarray:
    n_react = X.shape[1] - n_diff
    a = theta[:n_diff]
    b = theta[n_diff:n_diff + n_react]
    d, r = theta[-2], theta[-1]
    return X[:, :n_diff] @ a + d + np.tanh(X[:, n_diff:] @ b + r)


def rd_loss_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, n_diff: int) -> tuple[float, np.ndarray]:
    """Mean squared error and its analytic gradient."""
    return _LossGrad(X, y, n_diff)(theta)


class _LossGrad:
    """Loss/gradient evaluator with the design matrix split once."""

    def __init__(self, X, y, n_diff):
        self.Xd = np.ascontiguousarray(X[:, :n_diff])
        self.Xr = np.ascontiguousarray(X[:, n_diff:])
        self.y = y
        self.n_diff = n_diff
        self.n_react = X.shape[1] - n_diff

    def __call__(self, theta):
        nd, nr = self.n_diff, self.n_react
        n = self.y.size
        z = self.Xr @ theta[nd:nd + nr] + theta[-1]
        t = np.tanh(z)
        e = self.Xd @ theta[:nd] + theta[-2] + t - self.y
        es = e * (1.0 - t * t)
        g = np.empty_like(theta)
        g[:nd] = (2.0 / n) * (e @ self.Xd)
        g[nd:nd + nr] = (2.0 / n) * (es @ self.Xr)
        g[-2] = (2.0 / n) * e.sum()
        g[-1] = (2.0 / n) * es.sum()
        return float(e @ e) / n, g


@dataclass
class FitResult:
    params: RdParams
    loss: float
    iterations: int
    converged: bool


def fit_rd(variant: str, X: np.ndarray, y: np.ndarray, up: Sequence[str], down: Sequence[str],
           seed: int = 0, max_iters: int = 10_000, step: float = 1e-2, tol: float = 1e-9,
           bucket: str | None = None) -> FitResult:
    """Full-batch gradient descent on mean squared error from a zero start.

    Regressor columns are rescaled to unit RMS before descending, so one step
    size suits speeds and volumes alike; the returned coefficients are in
    original units. ``seed`` is accepted for interface stability: the zero
    start and full batch make the fit deterministic without it.
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n_diff, n_react = feature_layout(variant, up, down)
    if X.ndim != 2 or X.shape[1] != n_diff + n_react or X.shape[0] != y.size:
        raise InvalidInputError(f"design matrix shape {X.shape} does not fit {variant} layout")
    n_theta = n_diff + n_react + 2
    if y.size < 10 * n_theta:
        log.warning("fitting %d parameters on only %d samples", n_theta, y.size)

    col_scale = np.sqrt(np.mean(X**2, axis=0)) if y.size else np.ones(X.shape[1])
    col_scale[~(col_scale > 0)] = 1.0
    Xs = X / col_scale
    theta = np.zeros(n_theta)
    loss_grad = _LossGrad(Xs, y, n_diff)
    loss, grad = loss_grad(theta)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        theta = theta - step * grad
        # divergence is reported below, not as a float warning
        with np.errstate(over="ignore", invalid="ignore"):
            new_loss, grad = loss_grad(theta)
        if not math.isfinite(new_loss) or not np.all(np.isfinite(theta)):
            raise FitFailure("gradient descent diverged", it, new_loss)
        improvement = loss - new_loss
        loss = new_loss
        if 0 <= improvement < tol:
            converged = True
            break
    theta[:n_diff + n_react] /= col_scale
    params = RdParams.from_vector(variant, up, down, theta, bucket)
    return FitResult(params, loss, it, converged)


@dataclass(frozen=True)
class DensityBuckets:
    """Thresholds on density ``k = q / u`` splitting low | medium | high."""

    k1: float
    k2: float

    def __post_init__(self):
        if not 0 < self.k1 < self.k2:
            raise InvalidInputError(f"need 0 < k1 < k2, got {self.k1}, {self.k2}")

    def assign(self, speed, volume) -> np.ndarray:
        """Bucket index per sample: 0 low [0,k1), 1 medium [k1,k2], 2 high (k2,inf).

        Zero speed counts as maximal density.
        """
        u = np.asarray(speed, dtype=float)
        q = np.asarray(volume, dtype=float)
        stopped = u <= 0
        if np.any(stopped):
            log.info("%d stopped-traffic samples routed to the high-density bucket",
                     int(stopped.sum()))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            k = np.where(stopped, np.inf, q / np.where(stopped, 1.0, u))
        return np.where(k < self.k1, 0, np.where(k <= self.k2, 1, 2))

    @classmethod
    def tertiles(cls, speed, volume) -> "DensityBuckets":
        u = np.asarray(speed, dtype=float)
        q = np.asarray(volume, dtype=float)
        k = q[u > 0] / u[u > 0]
        k1, k2 = np.quantile(k, [1 / 3, 2 / 3]) if k.size else (0.0, 0.0)
        if not 0 < k1 < k2:
            # degenerate density spread: any positive ordered pair keeps the partition valid
            k1 = max(float(k1), 1e-12)
            k2 = max(float(k2), 2 * k1)
        return cls(float(k1), float(k2))


def density_split(speed, volume, thresholds: DensityBuckets) -> list[np.ndarray]:
    """Indices of the low, medium and high density samples."""
    labels = thresholds.assign(speed, volume)
    return [np.flatnonzero(labels == b) for b in range(3)]


@dataclass
class RdModel:
    """Fitted predictor for one sensor; UQ holds one parameter set per bucket."""

    node: str
    variant: str
    up: tuple[str, ...]
    down: tuple[str, ...]
    params: list[RdParams]
    thresholds: DensityBuckets | None = None

    def predict(self, X: np.ndarray, speed=None, volume=None) -> np.ndarray:
        n_diff, _ = feature_layout(self.variant, self.up, self.down)
        X = np.asarray(X, dtype=float)
        if self.thresholds is None:
            return rd_predict_matrix(self.params[0].to_vector(), X, n_diff)
        labels = self.thresholds.assign(speed, volume)
        out = np.empty(X.shape[0])
        for b, p in enumerate(self.params):
            rows = labels == b
            out[rows] = rd_predict_matrix(p.to_vector(), X[rows], n_diff)
        return out

    def to_dict(self) -> dict:
        return {
            "node": self.node, "variant": self.variant,
            "up": list(self.up), "down": list(self.down),
            "thresholds": None if self.thresholds is None
            else {"k1": self.thresholds.k1, "k2": self.thresholds.k2},
            "params": [p.to_dict() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RdModel":
        th = d.get("thresholds")
        return cls(d["node"], d["variant"], tuple(d["up"]), tuple(d["down"]),
                   [RdParams.from_dict(p) for p in d["params"]],
                   None if th is None else DensityBuckets(th["k1"], th["k2"]))


def fit_rd_model(node: str, variant: str, X: np.ndarray, y: np.ndarray, speed, volume,
                 up: Sequence[str], down: Sequence[str], thresholds: DensityBuckets | None = None,
                 split_density: bool | None = None, **opts) -> RdModel:
    """Fit one sensor's model. UQ splits by density unless told otherwise.

    A density bucket with fewer samples than parameters falls back to the
    parameters fitted on all samples.
    """
    up, down = tuple(sorted(up)), tuple(sorted(down))
    if split_density is None:
        split_density = variant == "UQ"
    if not split_density:
        res = fit_rd(variant, X, y, up, down, **opts)
        return RdModel(node, variant, up, down, [res.params])
    if thresholds is None:
        thresholds = DensityBuckets.tertiles(speed, volume)
    pooled = None
    params = []
    for b, idx in enumerate(density_split(speed, volume, thresholds)):
        n_theta = sum(feature_layout(variant, up, down)) + 2
        if idx.size < n_theta:
            log.warning("bucket %s of node %s has %d samples; using pooled fit",
                        BUCKETS[b], node, idx.size)
            if pooled is None:
                pooled = fit_rd(variant, X, y, up, down, **opts).params
            p = RdParams.from_dict(pooled.to_dict())
        else:
            p = fit_rd(variant, X[idx], y[idx], up, down, **opts).params
        p.bucket = BUCKETS[b]
        params.append(p)
    return RdModel(node, variant, up, down, params, thresholds)
