"""Gradient descent with sample reuse and population-level diagnostics.

A run draws ``n`` samples once and takes every full-batch step on them.
Along the trajectory it tracks the gap ``Delta(theta_t)`` between the
empirical mean gradient and the population gradient.  The population
gradient comes from an oracle:

* ``"analytic"`` for the linear model ``f(theta; x) = theta . x``, where
  ``grad L_D(theta) = Sigma (theta - theta*)`` with ``Sigma = I`` for
  Gaussian inputs and ``I/d`` for inputs uniform on the unit sphere;
* ``"fresh_mc"`` otherwise: an independent sample of ``M`` points drawn once
  per run (default ``M = 64 n``), whose mean gradient is an unbiased
  estimate at every ``theta``.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .networks import (
    LinearConfig,
    NetworkConfig,
    NetworkParams,
    forward_batch,
    init_network,
    param_dim,
    per_sample_gradients,
    weighted_gradient,
)
from .numerics import RngStream

__all__ = [
    "DivergenceError",
    "TeacherDistribution",
    "quadratic_1d",
    "PopulationOracle",
    "population_gradient",
    "GdTrace",
    "TRACE_COLUMNS",
    "gd_with_reuse",
    "gd_ratio_trace",
    "estimate_tau",
    "reuse_scaling_experiment",
    "population_convergence_experiment",
    "loglog_slope",
]

GRAD_FLOOR = 1e-10
DIVERGENCE_FACTOR = 1e6
TRACE_COLUMNS = ("t", "loss", "emp_grad_norm", "pop_grad_norm", "delta", "ratio_a1", "ratio_a2", "flags")


class DivergenceError(RuntimeError):
    """Raised when the training loss exceeds the divergence guard."""


@dataclass
class TeacherDistribution:
    """Inputs on the unit sphere (or Gaussian, linear model only) labelled by a teacher plus noise."""

    cfg: NetworkConfig | LinearConfig
    teacher: np.ndarray
    noise_std: float = 0.0
    input_law: str = "sphere"

    def __post_init__(self):
        self.teacher = self.teacher.flatten() if isinstance(self.teacher, NetworkParams) else np.asarray(
            self.teacher, dtype=float
        )
        if self.teacher.size != param_dim(self.cfg):
            raise ValueError("teacher parameter size does not match the model")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.input_law not in ("sphere", "gaussian"):
            raise ValueError("input_law must be 'sphere' or 'gaussian'")
        if self.input_law == "gaussian" and not self.is_linear:
            raise ValueError("Gaussian inputs are only supported for the linear model")

    @property
    def is_linear(self) -> bool:
        return isinstance(self.cfg, LinearConfig)

    @property
    def dim(self) -> int:
        return self.cfg.input_dim

    def sample(self, rng: RngStream, n: int) -> tuple[np.ndarray, np.ndarray]:
        X = rng.child("inputs").normal((n, self.dim))
        if self.input_law == "sphere":
            X /= np.linalg.norm(X, axis=1, keepdims=True)
        y = self.predict(X) + self.noise_std * rng.child("noise").normal(n)
        return X, y

    def predict(self, X: np.ndarray, theta=None) -> np.ndarray:
        theta = self.teacher if theta is None else theta
        if self.is_linear:
            return X @ theta
        return forward_batch(self.cfg, NetworkParams.unflatten(self.cfg, theta), X).f

    @property
    def optimal_loss(self) -> float:
        """Population loss of the (realizable) teacher: the label-noise floor."""
        return 0.5 * self.noise_std**2

    @property
    def covariance_scale(self) -> float:
        return 1.0 if self.input_law == "gaussian" else 1.0 / self.dim


def quadratic_1d(mu: float, noise_std: float) -> TeacherDistribution:
    """``l(theta; z) = (theta - z)^2 / 2`` with ``z = mu + noise`` as a 1-D linear model.

    With ``x = +-1`` the loss ``(theta x - y)^2 / 2`` equals ``(theta - x y)^2 / 2``
    and ``x y = mu + x noise`` has the law of ``mu + noise``.
    """
    return TeacherDistribution(LinearConfig(1), np.array([float(mu)]), noise_std, "sphere")


@dataclass
class PopulationOracle:
    """Population gradient and loss at any ``theta``, with a standard error for Monte-Carlo modes."""

    dist: TeacherDistribution
    mode: str = "analytic"
    X: np.ndarray | None = None
    y: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "analytic":
            if not self.dist.is_linear:
                raise ValueError("the analytic population gradient exists only for the linear model")
        elif self.mode == "fresh_mc":
            if self.X is None or self.y is None:
                raise ValueError("fresh_mc mode needs oracle samples")
        else:
            raise ValueError(f"unknown oracle mode {self.mode!r}")

    @classmethod
    def fresh(cls, dist: TeacherDistribution, M: int, rng: RngStream) -> "PopulationOracle":
        if M < 2:
            raise ValueError("M must be >= 2")
        X, y = dist.sample(rng, M)
        return cls(dist, "fresh_mc", X, y)

    def gradient(self, theta) -> tuple[np.ndarray, float]:
        theta = np.asarray(theta, dtype=float)
        if self.mode == "analytic":
            return self.dist.covariance_scale * (theta - self.dist.teacher), 0.0
        # the mean goes through the training-gradient path so a shared sample gives Delta = 0 exactly
        mean = weighted_gradient(self.dist.cfg, theta, self.X, self.y)[1]
        G = per_sample_gradients(self.dist.cfg, theta, self.X, self.y)[1]
        M = G.shape[0]
        se = float(np.linalg.norm(G.std(axis=0, ddof=1))) / math.sqrt(M)
        return mean, se

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if self.mode == "analytic":
            d = theta - self.dist.teacher
            return 0.5 * self.dist.covariance_scale * float(d @ d) + self.dist.optimal_loss
        return weighted_gradient(self.dist.cfg, theta, self.X, self.y)[0]


def population_gradient(
    dist: TeacherDistribution,
    theta,
    mode: str = "analytic",
    M: int | None = None,
    rng: RngStream | None = None,
    samples: tuple | None = None,
) -> tuple[np.ndarray, float]:
    """Population gradient and its standard error (``0`` in analytic mode).

    ``fresh_mc`` uses ``samples`` when given (the shared-sample identity)
    and otherwise draws ``M`` fresh points from ``rng``.
    """
    if mode == "analytic":
        return PopulationOracle(dist).gradient(theta)
    if mode != "fresh_mc":
        raise ValueError(f"unknown oracle mode {mode!r}")
    if samples is not None:
        return PopulationOracle(dist, "fresh_mc", *samples).gradient(theta)
    if M is None or rng is None:
        raise ValueError("fresh_mc needs M and rng, or explicit samples")
    return PopulationOracle.fresh(dist, M, rng).gradient(theta)


@dataclass
class GdTrace:
    t: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    emp_grad_norm: list = field(default_factory=list)
    pop_grad_norm: list = field(default_factory=list)
    pop_loss: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    pop_std_error: list = field(default_factory=list)
    hashes: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    optimal_loss: float = 0.0

    def __len__(self) -> int:
        return len(self.t)

    def ratios(self, alpha: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-step gradient-domination ratios and a mask of UNDEFINED steps."""
        g = np.asarray(self.pop_grad_norm)
        excess = np.asarray(self.pop_loss) - self.optimal_loss
        undefined = g <= GRAD_FLOOR
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(undefined, np.nan, excess / np.where(undefined, 1.0, g) ** alpha)
        return r, undefined

    def rows(self) -> list[dict]:
        r1, und = self.ratios(1)
        r2, _ = self.ratios(2)
        out = []
        for k, t in enumerate(self.t):
            out.append(
                {
                    "t": t,
                    "loss": self.loss[k],
                    "emp_grad_norm": self.emp_grad_norm[k],
                    "pop_grad_norm": self.pop_grad_norm[k],
                    "delta": self.delta[k],
                    "ratio_a1": "" if und[k] else float(r1[k]),
                    "ratio_a2": "" if und[k] else float(r2[k]),
                    "flags": "UNDEFINED" if und[k] else "",
                }
            )
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _hash(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()[:16]


def gd_with_reuse(
    dist: TeacherDistribution,
    theta0,
    eta: float,
    T: int,
    n: int,
    rng: RngStream,
    oracle: PopulationOracle | str = "analytic",
    oracle_factor: int = 64,
    samples: tuple | None = None,
) -> GdTrace:
    """Full-batch GD on one fixed sample of size ``n``, recording ``T + 1`` states.

    ``oracle`` may be a ready :class:`PopulationOracle`, ``"analytic"``,
    ``"fresh_mc"`` (``oracle_factor * n`` independent points) or ``"shared"``
    (the training sample itself, so ``Delta`` vanishes identically).
    """
    if not eta >= 0:
        raise ValueError("eta must be non-negative")
    if T < 0 or n < 1:
        raise ValueError("T must be >= 0 and n >= 1")
    X, y = samples if samples is not None else dist.sample(rng.child("data"), n)
    if isinstance(oracle, str):
        if oracle == "analytic":
            oracle = PopulationOracle(dist)
        elif oracle == "fresh_mc":
            oracle = PopulationOracle.fresh(dist, oracle_factor * n, rng.child("oracle"))
        elif oracle == "shared":
            oracle = PopulationOracle(dist, "fresh_mc", X, y)
        else:
            raise ValueError(f"unknown oracle {oracle!r}")
    theta = (theta0.flatten() if isinstance(theta0, NetworkParams) else np.asarray(theta0, dtype=float)).copy()
    every = max(1, math.ceil(T / 100))
    trace = GdTrace(optimal_loss=dist.optimal_loss)
    limit = None
    for t in range(T + 1):
        loss, grad = weighted_gradient(dist.cfg, theta, X, y)
        if limit is None:
            limit = DIVERGENCE_FACTOR * max(loss, 1e-300)
        if not math.isfinite(loss) or loss > limit:
            raise DivergenceError(
                f"loss {loss:.3e} at step {t} exceeds {DIVERGENCE_FACTOR:.0e} x initial loss; reduce eta (={eta})"
            )
        pg, se = oracle.gradient(theta)
        trace.t.append(t)
        trace.loss.append(loss)
        trace.emp_grad_norm.append(float(np.linalg.norm(grad)))
        trace.pop_grad_norm.append(float(np.linalg.norm(pg)))
        trace.pop_loss.append(oracle.loss(theta))
        trace.delta.append(float(np.linalg.norm(grad - pg)))
        trace.pop_std_error.append(se)
        trace.hashes.append(_hash(theta))
        if t % every == 0 or t == T:
            trace.snapshots[t] = theta.copy()
        if t < T:
            theta = theta - eta * grad
    return trace


def gd_ratio_trace(trace: GdTrace, alpha: int) -> dict:
    """Gradient-domination ratios ``(L_D(theta_t) - L_D*) / ||grad L_D(theta_t)||^alpha``."""
    if alpha not in (1, 2):
        raise ValueError("alpha must be 1 or 2")
    r, undefined = trace.ratios(alpha)
    if np.all(undefined):
        raise ValueError("every step has a vanishing population gradient; no ratio is defined")
    defined = r[~undefined]
    return {
        "alpha": alpha,
        "ratios": r,
        "undefined": undefined,
        "running_max": np.fmax.accumulate(np.where(undefined, -np.inf, r)),
        "max": float(defined.max()),
        "mean": float(defined.mean()),
        "all_finite": bool(np.all(np.isfinite(defined))),
    }


def loglog_slope(x, y) -> float:
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def _default_theta0(dist: TeacherDistribution, rng: RngStream) -> np.ndarray:
    if dist.is_linear:
        return np.zeros(param_dim(dist.cfg))
    return init_network(dist.cfg, rng.child("init")).flatten()


def reuse_scaling_experiment(
    dist: TeacherDistribution,
    eta: float,
    T: int,
    n_grid,
    trials: int,
    rng: RngStream,
    T_grid=tuple(2**k for k in range(4, 11)),
    sweep_n: int | None = None,
    oracle: str = "analytic",
    theta0=None,
) -> dict:
    """``max_t Delta(theta_t)`` against ``n`` (at fixed ``T``) and against ``T`` (at fixed ``n``).

    Trials use the same seeds across grid points.  The ``T`` sweep runs the
    longest horizon once per trial and reads every shorter horizon off its
    prefix, which is exactly what separate runs with those seeds produce.
    """
    n_grid = sorted(int(v) for v in n_grid)
    if len(n_grid) < 4 or n_grid[-1] < 16 * n_grid[0]:
        raise ValueError("n-grid needs at least 4 points spanning a factor of 16 or more")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    def start(sub):
        return _default_theta0(dist, sub) if theta0 is None else theta0

    rows = []
    for n in n_grid:
        vals = []
        for k in range(trials):
            sub = rng.child("trial").child(k)
            tr = gd_with_reuse(dist, start(sub), eta, T, n, sub.child(f"n={n}"), oracle)
            vals.append(max(tr.delta))
        rows.append({"n": n, "T": T, "max_delta": float(np.mean(vals)), "std_error": float(np.std(vals, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0})
    slope_n = loglog_slope([r["n"] for r in rows], [r["max_delta"] for r in rows])

    T_grid = sorted(int(v) for v in T_grid)
    sweep_n = sweep_n or n_grid[len(n_grid) // 2]
    per_T = np.zeros((trials, len(T_grid)))
    for k in range(trials):
        sub = rng.child("trial").child(k)
        tr = gd_with_reuse(dist, start(sub), eta, T_grid[-1], sweep_n, sub.child(f"n={sweep_n}"), oracle)
        d = np.asarray(tr.delta)
        per_T[k] = [d[: Tk + 1].max() for Tk in T_grid]
    t_rows = [
        {"n": sweep_n, "T": Tk, "max_delta": float(per_T[:, j].mean())} for j, Tk in enumerate(T_grid)
    ]
    slope_T = loglog_slope(T_grid, [r["max_delta"] for r in t_rows])
    sqrt_log_fit = np.polyfit(np.sqrt(np.log(T_grid)), [r["max_delta"] for r in t_rows], 1)
    return {
        "n_rows": rows,
        "T_rows": t_rows,
        "slope_vs_n": slope_n,
        "exponent_vs_T": slope_T,
        "sqrt_log_T_fit": {"slope": float(sqrt_log_fit[0]), "intercept": float(sqrt_log_fit[1])},
    }


def estimate_tau(oracle: PopulationOracle, center, rng: RngStream, pairs: int = 32, radius: float = 1.0) -> float:
    """Largest observed ``||grad L_D(a) - grad L_D(b)|| / ||a - b||`` over random pairs near ``center``."""
    center = np.asarray(center, dtype=float)
    p = center.size
    best = 0.0
    for k in range(pairs):
        sub = rng.child(k)
        a = center + radius * sub.normal(p) / math.sqrt(p)
        b = a + radius * sub.normal(p) / math.sqrt(p)
        ga, gb = oracle.gradient(a)[0], oracle.gradient(b)[0]
        best = max(best, float(np.linalg.norm(ga - gb) / np.linalg.norm(a - b)))
    if best <= 0:
        raise ValueError("curvature probes found a flat population loss; tau is undefined")
    return best


def population_convergence_experiment(
    dist: TeacherDistribution,
    T: int,
    n: int,
    trials: int,
    rng: RngStream,
    eta: float | None = None,
    oracle: str = "analytic",
    oracle_factor: int = 64,
    theta0=None,
) -> dict:
    """``(1/T) sum_{t<T} ||grad L_D(theta_t)||^2`` averaged over trials.

    ``eta`` defaults to ``1/(4 tau_hat)`` with ``tau_hat`` from curvature
    probes around the start.  ``oracle="shared"`` makes the training sample
    the population oracle (oracle-scale ``n``).
    """
    if T < 1 or trials < 1:
        raise ValueError("T and trials must be >= 1")
    metrics, taus, etas = [], [], []
    for k in range(trials):
        sub = rng.child("trial").child(k)
        th0 = _default_theta0(dist, sub) if theta0 is None else np.asarray(theta0, dtype=float)
        X, y = dist.sample(sub.child("data"), n)
        if oracle == "analytic":
            orc = PopulationOracle(dist)
        elif oracle == "shared":
            orc = PopulationOracle(dist, "fresh_mc", X, y)
        elif oracle == "fresh_mc":
            orc = PopulationOracle.fresh(dist, oracle_factor * n, sub.child("oracle"))
        else:
            raise ValueError(f"unknown oracle {oracle!r}")
        step = eta
        if step is None:
            tau = estimate_tau(orc, th0, sub.child("tau"))
            taus.append(tau)
            step = 1.0 / (4.0 * tau)
        etas.append(step)
        tr = gd_with_reuse(dist, th0, step, T, n, sub, orc, samples=(X, y))
        g2 = np.asarray(tr.pop_grad_norm[:T]) ** 2
        metrics.append(float(g2.mean()))
    return {
        "T": T,
        "n": n,
        "metric": float(np.mean(metrics)),
        "std_error": float(np.std(metrics, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        "per_trial": metrics,
        "tau_hat": taus,
        "eta": etas,
    }
