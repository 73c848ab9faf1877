"""Numerical checks of the chaining ingredients and evaluation of closed-form bounds.

Every symbolic constant in the bounds is set to 1; that convention is
stamped into each :class:`BoundReport`.  Comparisons against Monte-Carlo
estimates fit a constant instead of asserting one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .canonical import BOUND_CONVENTION
from .geometry import (
    GradientSetSpec,
    InnerBudget,
    featurizer_width_estimate,
    lggw_estimate,
)
from .networks import (
    NetworkConfig,
    _layer_scales,
    _dphi,
    betas,
    boundary_point,
    forward_batch,
    init_network,
    SpectralBall,
)
from .numerics import RngStream

__all__ = [
    "DEFAULT_U_GRID",
    "EXHAUSTIVE_LIMIT",
    "TailCheckReport",
    "BoundReport",
    "sic_tail_check",
    "sic_from_gradients",
    "ffn_width_bound",
    "resnet_width_bound",
    "resnet_envelope",
    "generalization_bound_eval",
    "width_vs_bound_check",
    "layer_lemma_check",
]

DEFAULT_U_GRID = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
EXHAUSTIVE_LIMIT = 16
MU_TOLERANCE = 1e-12


@dataclass
class TailCheckReport:
    u_grid: np.ndarray
    empirical_tail: np.ndarray
    bound: np.ndarray
    mu_hat: float
    n: int
    trials: int
    exhaustive: bool
    std_error: np.ndarray = field(repr=False)

    @property
    def tail_ok(self) -> bool:
        return bool(np.all(self.empirical_tail <= self.bound + 3.0 * self.std_error))

    @property
    def mu_ok(self) -> bool:
        return self.mu_hat <= 1.0 + MU_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.tail_ok and self.mu_ok

    def to_record(self) -> dict:
        return {
            "n": self.n,
            "trials": self.trials,
            "exhaustive": self.exhaustive,
            "mu_hat": self.mu_hat,
            "u_grid": self.u_grid.tolist(),
            "empirical_tail": self.empirical_tail.tolist(),
            "bound": self.bound.tolist(),
            "passed": self.passed,
        }


@dataclass
class BoundReport:
    components: dict
    convention: str = BOUND_CONVENTION
    extras: dict = field(default_factory=dict)

    @property
    def bound_value(self) -> float:
        return float(sum(self.components.values()))

    def to_record(self) -> dict:
        return {
            "bound_value": self.bound_value,
            "components": dict(self.components),
            "convention": self.convention,
            **self.extras,
        }


def _all_sign_patterns(n: int) -> np.ndarray:
    codes = np.arange(2**n, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n, dtype=np.int64)) & 1
    return 2.0 * bits - 1.0


def sic_tail_check(
    vectors,
    trials: int | str | None = None,
    rng: RngStream | None = None,
    u_grid=DEFAULT_U_GRID,
) -> TailCheckReport:
    """Sub-Gaussian tail of ``||(1/sqrt(n)) sum_i eps_i v_i||`` around its mean.

    ``trials`` may be ``"exhaustive"`` (or ``None`` with ``n <= 16``) to
    enumerate all ``2**n`` sign patterns, in which case frequencies are exact
    probabilities and carry zero standard error; otherwise an integer number
    of Monte-Carlo sign draws.
    """
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    n = V.shape[0]
    total = float((V**2).sum())
    if total > n * (1 + 1e-10):
        raise ValueError(f"norm-sum condition violated: sum ||v_i||^2 = {total} > n = {n}")
    exhaustive = trials == "exhaustive" or (trials is None and n <= EXHAUSTIVE_LIMIT)
    if exhaustive:
        if n > 24:
            raise ValueError("exhaustive enumeration is limited to n <= 24")
        signs = _all_sign_patterns(n)
    else:
        if trials is None:
            raise ValueError("trials required when n exceeds the exhaustive limit")
        if rng is None:
            raise ValueError("Monte-Carlo mode needs an RngStream")
        trials = int(trials)
        if trials < 1:
            raise ValueError("trials must be positive")
        signs = rng.signs((trials, n))
    norms = np.empty(signs.shape[0])
    chunk = 1 << 16
    for s in range(0, signs.shape[0], chunk):
        norms[s : s + chunk] = np.linalg.norm(signs[s : s + chunk] @ V, axis=1)
    norms /= math.sqrt(n)
    mu = float(norms.mean())
    u = np.asarray(u_grid, dtype=float)
    dev = np.abs(norms - mu)
    freq = (dev[None, :] >= u[:, None]).mean(axis=1)
    count = norms.size
    se = np.zeros_like(freq) if exhaustive else np.sqrt(freq * (1 - freq) / count)
    return TailCheckReport(u, freq, 2.0 * np.exp(-(u**2) / 2.0), mu, n, count, exhaustive, se)


def sic_from_gradients(spec: GradientSetSpec, theta_a, theta_b, trials=None, rng=None, u_grid=DEFAULT_U_GRID):
    """SIC check on normalised gradient differences between two ball points."""
    from .geometry import _require_member

    a = _require_member(spec, theta_a)
    b = _require_member(spec, theta_b)
    diff = spec.grads(a) - spec.grads(b)
    dist = math.sqrt(float((diff**2).sum()) / spec.n)
    if dist == 0.0:
        raise ZeroDivisionError("the two parameter points give identical gradients (zero distance)")
    return sic_tail_check(diff / dist, trials, rng, u_grid)


def _check_betas(beta: np.ndarray) -> None:
    if np.any(beta <= 0):
        raise ValueError("all beta_l must be positive")


def ffn_width_bound(cfg: NetworkConfig, rho: float, rho1: float, featurizer_width: float) -> BoundReport:
    """``w(A) + (1 + rho1) sqrt(m_L) prod(beta_l) sum_l 1/(beta_l sqrt(m_l))``."""
    beta = betas(cfg, rho)
    _check_betas(beta)
    m = np.asarray(cfg.widths, dtype=float)
    second = (1 + rho1) * math.sqrt(m[-1]) * float(np.prod(beta)) * float(np.sum(1.0 / (beta * np.sqrt(m))))
    return BoundReport(
        {"featurizer_term": float(featurizer_width), "second_term": second},
        extras={"arch": "ffn", "betas": beta.tolist()},
    )


def resnet_envelope(beta: float, depth: int) -> tuple[float, float]:
    """``((1 + beta/L)^(L-1), e^beta)``; the first never exceeds the second."""
    return (1 + beta / depth) ** (depth - 1), math.exp(beta)


def resnet_width_bound(cfg: NetworkConfig, rho: float, rho1: float, featurizer_width: float) -> BoundReport:
    """``w(A) + ((1 + rho1)/L) sqrt(m_L) prod(1 + beta_l/L) sum_l 1/((1 + beta_l/L) sqrt(m_l))``.

    Zero ``beta`` is admissible here since the factors ``1 + beta_l/L`` stay
    positive.  For equal widths the record also carries the exponential
    envelope ``(1 + rho1) e^beta`` of the second term.
    """
    beta = betas(cfg, rho)
    if np.any(beta < 0):
        raise ValueError("beta_l must be non-negative")
    L = cfg.depth
    m = np.asarray(cfg.widths, dtype=float)
    fac = 1 + beta / L
    second = (1 + rho1) / L * math.sqrt(m[-1]) * float(np.prod(fac)) * float(np.sum(1.0 / (fac * np.sqrt(m))))
    extras = {"arch": "resnet", "betas": beta.tolist()}
    if np.all(m == m[0]):
        power, env = resnet_envelope(float(beta[0]), L)
        extras["equal_width_second_term"] = (1 + rho1) * power
        extras["exp_envelope"] = (1 + rho1) * env
    return BoundReport({"featurizer_term": float(featurizer_width), "second_term": second}, extras=extras)


def generalization_bound_eval(
    empirical_grad_norm: float, width: float, n: int, delta: float, cbar1: float = 1.0
) -> float:
    """Population gradient-domination bound for ``alpha = 1`` with unit constants."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if n < 1:
        raise ValueError("n must be >= 1")
    if width < 0 or empirical_grad_norm < 0:
        raise ValueError("width and gradient norm must be non-negative")
    log_term = math.log(1.0 / delta)
    inner = empirical_grad_norm + 2.0 * (4.0 * width / math.sqrt(n) + log_term / n)
    return 2.0 * cbar1 * inner + math.sqrt(log_term / n)


def width_vs_bound_check(
    spec: GradientSetSpec,
    rng: RngStream,
    outer: int = 32,
    inner: InnerBudget | None = None,
) -> dict:
    """Single-sample LGGW against the architecture bound, with the smallest fitting constant."""
    if spec.n != 1:
        raise ValueError("the width bounds concern a single sample (n = 1)")
    cfg = spec.cfg
    est = lggw_estimate(spec, rng.child("lggw"), outer, inner)
    feat = featurizer_width_estimate(spec, rng.child("featurizer"), outer, inner)
    bound_fn = ffn_width_bound if cfg.arch == "ffn" else resnet_width_bound
    bound = bound_fn(cfg, spec.ball.rho, spec.ball.rho1, max(feat.value, 0.0))
    if spec.ball.is_singleton or est.value <= 0:
        c_star = 0.0
    else:
        c_star = est.value / bound.bound_value
    return {
        "estimated_lggw_single_sample": est.value,
        "lggw_std_error": est.std_error,
        "featurizer_width": feat.value,
        "featurizer_std_error": feat.std_error,
        "bound": bound.to_record(),
        "satisfied_up_to_constant": c_star,
    }


# ---------------------------------------------------------------------------
# layer lemmas


def layer_lemma_check(
    cfg: NetworkConfig, rho: float, rho1: float, trials: int, rng: RngStream
) -> dict:
    """Frequencies of the per-layer output, Jacobian and parameter-gradient bounds.

    Standard errors are binomial at the stated probability.  Each trial
    draws a fresh initialisation, a ball point whose every
    deviation has spectral norm exactly ``rho`` in a random direction, and a
    random unit input.  For layer ``l`` the bounds compared are

    * FFN: ``||alpha_l|| <= prod_{k<=l} beta_k``,
      ``||d alpha_l / d alpha_{l-1}|| <= beta_l`` (``l >= 2``) and
      ``||d alpha_l / d w_l|| <= prod_{k<l} beta_k / sqrt(m_l)``;
    * ResNet: the same with ``beta_k`` replaced by ``1 + beta_k/L`` and the
      parameter gradient carrying an extra ``1/L``.

    ``d alpha_l / d w_l`` has orthogonal rows, so its spectral norm is
    ``max_i |phi'_i| ||alpha_{l-1}|| scale_l`` exactly.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    L = cfg.depth
    beta = betas(cfg, rho)
    m = np.asarray(cfg.widths, dtype=float)
    scales = _layer_scales(cfg)
    if cfg.arch == "ffn":
        growth = beta
    else:
        growth = 1 + beta / L
    out_bound = np.cumprod(growth)
    prev = np.concatenate([[1.0], out_bound[:-1]])
    grad_bound = prev / np.sqrt(m) / (1.0 if cfg.arch == "ffn" else L)
    jac_bound = growth

    hits = {"layer_output": np.zeros(L), "jacobian": np.zeros(L), "param_gradient": np.zeros(L)}
    slack = 1e-9
    for t in range(trials):
        sub = rng.child(t)
        center = init_network(cfg, sub.child("init"))
        ball = SpectralBall(center, rho, rho1)
        params = boundary_point(ball, sub.child("ball"))
        x = sub.child("data").normal(cfg.input_dim)
        x /= np.linalg.norm(x)
        cache = forward_batch(cfg, params, x[None, :])
        for l in range(L):
            a_prev = cache.alphas[l][0]
            dp = _dphi(cfg, cache.pre[l][0])
            hits["layer_output"][l] += np.linalg.norm(cache.alphas[l + 1][0]) <= out_bound[l] * (1 + slack)
            gnorm = float(np.abs(dp).max()) * float(np.linalg.norm(a_prev)) * scales[l]
            hits["param_gradient"][l] += gnorm <= grad_bound[l] * (1 + slack)
            if l >= 1:
                J = dp[:, None] * params.weights[l] * scales[l]
                if cfg.arch == "resnet":
                    J = J + np.eye(J.shape[0])
                hits["jacobian"][l] += np.linalg.norm(J, 2) <= jac_bound[l] * (1 + slack)

    two_over_m = 2.0 / m
    stated = {
        "layer_output": 1 - np.cumsum(two_over_m),
        "jacobian": 1 - two_over_m,
        "param_gradient": 1 - (np.concatenate([[0.0], np.cumsum(two_over_m)[:-1]]) if cfg.arch == "ffn" else np.cumsum(two_over_m)),
    }
    report = {"arch": cfg.arch, "widths": list(cfg.widths), "trials": trials, "rho": rho, "checks": {}}
    all_ok = True
    for name, h in hits.items():
        layers = range(1, L) if name == "jacobian" else range(L)
        rows = []
        for l in layers:
            freq = h[l] / trials
            p_stated = max(float(stated[name][l]), 0.0)
            se = math.sqrt(p_stated * (1 - p_stated) / trials)
            ok = freq >= p_stated - 3 * se
            all_ok &= bool(ok)
            rows.append(
                {"layer": l + 1, "frequency": freq, "stated_probability": p_stated, "std_error": se, "passed": bool(ok)}
            )
        report["checks"][name] = rows
    report["passed"] = all_ok
    return report
