"""Gradient sets over a parameter ball and Monte-Carlo estimates of their complexity.

The estimators here approximate an expected supremum over a parameter
ball.  The outer expectation is an honest Monte-Carlo average; the inner
supremum is approximated by multi-start projected ascent plus a random
search baseline, so every estimate is a *lower* estimate of the quantity it
targets.  Diagnostics record how often ascent beat random search.

Ascent directions need derivatives of gradient functionals, i.e.
Hessian-vector products.  These are taken as central differences of the
analytic gradient along the required direction (two extra backward passes
per product), which is exact for piecewise-quadratic losses away from relu
kinks and second-order accurate otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .canonical import WidthEstimate
from .networks import (
    EuclideanBall,
    LinearConfig,
    MembershipError,
    NetworkConfig,
    NetworkParams,
    SpectralBall,
    _backward,
    forward_batch,
    param_dim,
    per_sample_gradients,
    project_to_ball,
    random_ball_point,
    weighted_gradient,
)
from .numerics import RngStream

__all__ = [
    "GradientSetSpec",
    "StackedGradient",
    "InnerBudget",
    "stacked_gradient",
    "lggw_estimate",
    "nerc_estimate",
    "sorted_gradient_profile",
    "featurizer_sparsity",
    "featurizer_width_estimate",
    "gradient_norm_sweep",
    "output_gradient",
]


@dataclass
class GradientSetSpec:
    cfg: NetworkConfig | LinearConfig
    ball: SpectralBall | EuclideanBall
    X: np.ndarray
    y: np.ndarray
    test_mode: bool = False

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.X.shape[0] < 1:
            raise ValueError("need at least one sample")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y have different sample counts")
        if not self.test_mode:
            norms = np.linalg.norm(self.X, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-10):
                raise ValueError("every input must have unit L2 norm")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return param_dim(self.cfg)

    def center(self) -> np.ndarray:
        c = self.ball.center
        return c.flatten() if isinstance(c, NetworkParams) else np.asarray(c, dtype=float).copy()

    def grads(self, theta) -> np.ndarray:
        return per_sample_gradients(self.cfg, theta, self.X, self.y, self.test_mode)[1]


@dataclass
class StackedGradient:
    entries: np.ndarray
    n: int
    p: int
    theta: np.ndarray = field(repr=False)


@dataclass
class InnerBudget:
    """Inner maximisation budget: ``step_size`` is a fraction of each block radius."""

    restarts: int = 8
    steps: int = 50
    step_size: float = 0.1
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


def _as_flat(theta) -> np.ndarray:
    return theta.flatten() if isinstance(theta, NetworkParams) else np.asarray(theta, dtype=float)


def _require_member(spec: GradientSetSpec, theta) -> np.ndarray:
    flat = _as_flat(theta)
    if isinstance(spec.ball, SpectralBall):
        member = spec.ball.contains(NetworkParams.unflatten(spec.cfg, flat))
    else:
        member = spec.ball.contains(flat)
    if not member:
        raise MembershipError("parameters lie outside the parameter ball")
    return flat


def stacked_gradient(spec: GradientSetSpec, params) -> StackedGradient:
    """``(1/sqrt(n)) [grad l(theta; z_1); ...; grad l(theta; z_n)]``."""
    theta = _require_member(spec, params)
    G = spec.grads(theta)
    return StackedGradient((G / math.sqrt(spec.n)).ravel(), spec.n, spec.p, theta)


# ---------------------------------------------------------------------------
# inner maximisation


def _blocks(spec_cfg, ball) -> list[tuple[slice, float]]:
    """Parameter blocks with their ball radii (steps are normalised per block)."""
    if isinstance(ball, EuclideanBall):
        return [(slice(0, ball.center.size), ball.radius)]
    out, pos = [], 0
    for w0 in ball.center.weights:
        out.append((slice(pos, pos + w0.size), ball.rho))
        pos += w0.size
    out.append((slice(pos, pos + ball.center.v.size), ball.rho1))
    return out


def _block_step(direction: np.ndarray, blocks, frac: float) -> np.ndarray:
    step = np.zeros_like(direction)
    for sl, radius in blocks:
        d = direction[sl]
        nd = float(np.linalg.norm(d))
        if radius > 0 and nd > 0:
            step[sl] = frac * radius * d / nd
    return step


def _maximize(objective, ascent_dir, ball, blocks, center, rng: RngStream, budget: InnerBudget):
    """Best objective over ascent from center + random starts, and over random search.

    Returns ``(best_value, ascent_best, random_best)``.
    """
    starts = [center] + [random_ball_point(ball, rng) for _ in range(budget.restarts - 1)]
    ascent_best = -np.inf
    for theta in starts:
        val = objective(theta)
        frac = budget.step_size
        direction = ascent_dir(theta) if budget.steps else None
        for _ in range(budget.steps):
            if direction is None or not np.any(direction) or frac < 1e-6:
                break
            cand = project_to_ball(theta + _block_step(direction, blocks, frac), ball)
            cval = objective(cand)
            if cval > val:
                theta, val = cand, cval
                direction = ascent_dir(theta)
            else:
                frac *= 0.5
        ascent_best = max(ascent_best, val)
    random_best = max(objective(random_ball_point(ball, rng)) for _ in range(budget.restarts))
    return max(ascent_best, random_best), ascent_best, random_best


def _run_outer(draws: np.ndarray, solve, budget: InnerBudget, rng: RngStream, scale: float = 1.0):
    values = np.empty(draws.shape[0])
    beat = 0
    for k, draw in enumerate(draws):
        best, asc, rnd = solve(draw, rng.child(k))
        values[k] = scale * best
        beat += asc > rnd
    n = draws.shape[0]
    std = float(np.std(values, ddof=1)) if n > 1 else 0.0
    diag = {
        "restarts": budget.restarts,
        "steps": budget.steps,
        "ascent_beat_random_fraction": beat / n,
    }
    return WidthEstimate(float(values.mean()), std / math.sqrt(n), n, diag)


def _hvp_fd(spec: GradientSetSpec, theta, direction: np.ndarray, X, y, weights, h: float):
    nd = float(np.linalg.norm(direction))
    if nd == 0:
        return np.zeros_like(theta)
    u = direction / nd
    gp = weighted_gradient(spec.cfg, theta + h * u, X, y, weights, spec.test_mode)[1]
    gm = weighted_gradient(spec.cfg, theta - h * u, X, y, weights, spec.test_mode)[1]
    return (gp - gm) * (nd / (2.0 * h))


def lggw_estimate(
    spec: GradientSetSpec, rng: RngStream, outer: int, inner: InnerBudget | None = None
) -> WidthEstimate:
    """Monte-Carlo loss-gradient Gaussian width of the scaled stacked gradient set.

    For each Gaussian ``g`` in ``R^{n p}`` (split into per-sample rows
    ``g_i``) the functional ``(1/sqrt(n)) sum_i <grad l(theta; z_i), g_i>``
    is maximised over the ball.  Its ascent direction is
    ``(1/sqrt(n)) sum_i H_i(theta) g_i``.
    """
    if outer < 2:
        raise ValueError("outer must be >= 2")
    inner = inner or InnerBudget()
    n, p = spec.n, spec.p
    blocks = _blocks(spec.cfg, spec.ball)
    center = spec.center()
    root_n = math.sqrt(n)
    one = np.ones(1)

    def solve(gvec, sub):
        Gm = gvec.reshape(n, p)

        def objective(theta):
            return float((spec.grads(theta) * Gm).sum()) / root_n

        def ascent(theta):
            total = np.zeros(p)
            for i in range(n):
                total += _hvp_fd(spec, theta, Gm[i], spec.X[i : i + 1], spec.y[i : i + 1], one, inner.fd_step)
            return total / root_n

        if spec.ball.is_singleton:
            v = objective(center)
            return v, v, v
        return _maximize(objective, ascent, spec.ball, blocks, center, sub, inner)

    draws = rng.child("gaussian-outer").normal((outer, n * p))
    return _run_outer(draws, solve, inner, rng.child("inner-restarts"))


def nerc_estimate(
    spec: GradientSetSpec, rng: RngStream, outer: int, inner: InnerBudget | None = None
) -> WidthEstimate:
    """Normed empirical Rademacher complexity ``(1/n) E sup_theta ||sum_i eps_i grad l_i||_2``."""
    if outer < 2:
        raise ValueError("outer must be >= 2")
    inner = inner or InnerBudget()
    blocks = _blocks(spec.cfg, spec.ball)
    center = spec.center()

    def solve(eps, sub):
        def signed(theta):
            return weighted_gradient(spec.cfg, theta, spec.X, spec.y, eps, spec.test_mode)[1]

        def objective(theta):
            return float(np.linalg.norm(signed(theta)))

        def ascent(theta):
            s = signed(theta)
            return _hvp_fd(spec, theta, s, spec.X, spec.y, eps, inner.fd_step) / max(
                float(np.linalg.norm(s)), 1e-300
            )

        if spec.ball.is_singleton:
            v = objective(center)
            return v, v, v
        return _maximize(objective, ascent, spec.ball, blocks, center, sub, inner)

    draws = rng.child("rademacher").signs((outer, spec.n))
    return _run_outer(draws, solve, inner, rng.child("inner-restarts"), scale=1.0 / spec.n)


def sorted_gradient_profile(spec: GradientSetSpec, params) -> np.ndarray:
    """Absolute coordinates of the mean loss gradient, sorted ascending."""
    theta = _require_member(spec, params)
    return np.sort(np.abs(spec.grads(theta).mean(axis=0)))


def featurizer_sparsity(spec: GradientSetSpec, params, l0_threshold: float = 1e-6) -> dict:
    """Per-sample L0 (entries above threshold in magnitude) and L1 norms of the featurizer."""
    if not l0_threshold >= 0:
        raise ValueError("l0_threshold must be non-negative")
    if not isinstance(spec.cfg, NetworkConfig):
        raise TypeError("featurizer sparsity needs a network model")
    theta = _require_member(spec, params)
    cache = forward_batch(spec.cfg, NetworkParams.unflatten(spec.cfg, theta), spec.X, spec.test_mode)
    H = np.abs(cache.alphas[-1])
    l0 = (H > l0_threshold).sum(axis=1)
    l1 = H.sum(axis=1)
    return {
        "l0": l0.tolist(),
        "l1": l1.tolist(),
        "l0_mean": float(l0.mean()),
        "l0_max": int(l0.max()),
        "l1_mean": float(l1.mean()),
        "l1_max": float(l1.max()),
    }


def output_gradient(cfg: NetworkConfig, params: NetworkParams, X, coef, test_mode: bool = False) -> np.ndarray:
    """``grad_theta sum_i coef_i f(theta; x_i)`` by one reverse pass."""
    cache = forward_batch(cfg, params, X, test_mode)
    coef = np.asarray(coef, dtype=float)
    deltas = _backward(cfg, params, cache, coef)
    blocks = [(d.T @ a).ravel() for d, a in zip(deltas, cache.alphas[:-1])]
    blocks.append(cache.alphas[-1].T @ coef)
    return np.concatenate(blocks)


def featurizer_width_estimate(
    spec: GradientSetSpec, rng: RngStream, outer: int, inner: InnerBudget | None = None
) -> WidthEstimate:
    """Width of the single-sample featurizer set ``{alpha_L(W, x) : W in ball}``.

    The last-layer radius is ignored.  ``<alpha_L(W, x), g>`` is the network
    output with ``v`` replaced by ``g``, so its gradient in ``W`` comes from an
    ordinary reverse pass.
    """
    if spec.n != 1:
        raise ValueError("featurizer width is defined for a single sample (n = 1)")
    if not isinstance(spec.cfg, NetworkConfig):
        raise TypeError("featurizer width needs a network model")
    if outer < 2:
        raise ValueError("outer must be >= 2")
    inner = inner or InnerBudget()
    cfg = spec.cfg
    ball = SpectralBall(spec.ball.center, spec.ball.rho, 0.0)
    blocks = _blocks(cfg, ball)
    center = ball.center.flatten()
    x = spec.X
    nw = center.size - cfg.widths[-1]
    one = np.ones(1)

    def solve(g, sub):
        def params_with(theta):
            prm = NetworkParams.unflatten(cfg, theta)
            prm.v = g
            return prm

        def objective(theta):
            prm = params_with(theta)
            return float(forward_batch(cfg, prm, x, spec.test_mode).f[0])

        def ascent(theta):
            d = output_gradient(cfg, params_with(theta), x, one, spec.test_mode)
            d[nw:] = 0.0
            return d

        if ball.rho == 0:
            v = objective(center)
            return v, v, v
        return _maximize(objective, ascent, ball, blocks, center, sub, inner)

    draws = rng.child("gaussian-outer").normal((outer, cfg.widths[-1]))
    return _run_outer(draws, solve, inner, rng.child("inner-restarts"))


def gradient_norm_sweep(spec: GradientSetSpec, rng: RngStream, points: int = 10_000) -> dict:
    """Largest per-sample gradient norm over random points of the ball (bounded-gradient check)."""
    best = 0.0
    for k in range(points):
        theta = spec.center() if k == 0 else random_ball_point(spec.ball, rng)
        best = max(best, float(np.linalg.norm(spec.grads(theta), axis=1).max()))
    return {"points": points, "max_gradient_norm": best, "finite": bool(math.isfinite(best))}
