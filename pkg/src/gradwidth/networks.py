"""Feed-forward and residual networks with hand-written backpropagation.

FFN::

    alpha_0 = x
    alpha_l = phi(W_l alpha_{l-1} / sqrt(m_l))
    f       = v . alpha_L

ResNet (all widths equal to ``m``, input zero-padded to ``m``)::

    alpha_l = alpha_{l-1} + phi(W_l alpha_{l-1} / (L sqrt(m)))

Parameters flatten to ``theta = (vec W_1, ..., vec W_L, v)`` with ``vec`` in
row-major order.  Loss is the squared loss ``(y - f)^2 / 2``.

All batched routines take inputs as rows of ``X`` with shape ``(n, d)``.
A plain linear model ``f(theta; x) = theta . x`` shares the same gradient
interface so the estimators and the optimisation lab can treat both alike.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, RngStream, spectral_norm

__all__ = [
    "NetworkConfig",
    "LinearConfig",
    "NetworkParams",
    "SpectralBall",
    "EuclideanBall",
    "ForwardCache",
    "MembershipError",
    "init_sigmas",
    "betas",
    "init_network",
    "forward",
    "forward_batch",
    "loss_and_gradient",
    "per_sample_gradients",
    "weighted_gradient",
    "featurizer",
    "project_to_ball",
    "random_ball_point",
    "boundary_point",
    "init_spectral_check",
    "param_dim",
]

_ACTIVATIONS = ("relu", "tanh")


class MembershipError(ValueError):
    """Raised when parameters lie outside the parameter ball."""


@dataclass(frozen=True)
class NetworkConfig:
    arch: str
    depth: int
    widths: tuple
    input_dim: int
    sigma1: float
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(m) for m in self.widths))
        if self.arch not in ("ffn", "resnet"):
            raise ValueError(f"arch must be 'ffn' or 'resnet', got {self.arch!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.widths) != self.depth:
            raise ValueError(f"expected {self.depth} widths, got {len(self.widths)}")
        if any(m < 1 for m in self.widths):
            raise ValueError("all widths must be >= 1")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.sigma1 >= 0:
            raise ValueError("sigma1 must be non-negative")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if self.arch == "resnet":
            if len(set(self.widths)) != 1:
                raise ValueError("resnet requires all widths equal for the skip connection")
            if self.input_dim > self.widths[0]:
                raise ValueError("resnet input_dim must not exceed the layer width")

    @property
    def in_dims(self) -> tuple:
        """Column counts of ``W_1..W_L`` (``m_0`` first)."""
        m0 = self.widths[0] if self.arch == "resnet" else self.input_dim
        return (m0,) + self.widths[:-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths, self.in_dims))

    def to_record(self) -> dict:
        return {
            "arch": self.arch,
            "depth": self.depth,
            "widths": list(self.widths),
            "input_dim": self.input_dim,
            "sigma1": self.sigma1,
            "activation": self.activation,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "NetworkConfig":
        return cls(
            arch=rec["arch"],
            depth=int(rec["depth"]),
            widths=tuple(rec["widths"]),
            input_dim=int(rec["input_dim"]),
            sigma1=float(rec["sigma1"]),
            activation=rec.get("activation", "relu"),
        )


@dataclass(frozen=True)
class LinearConfig:
    """Linear predictor ``f(theta; x) = theta . x`` with squared loss."""

    input_dim: int


def param_dim(cfg) -> int:
    if isinstance(cfg, LinearConfig):
        return cfg.input_dim
    return sum(a * b for a, b in cfg.shapes) + cfg.widths[-1]


@dataclass
class NetworkParams:
    weights: list
    v: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [self.v])

    @classmethod
    def unflatten(cls, cfg: NetworkConfig, theta: np.ndarray) -> "NetworkParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != param_dim(cfg):
            raise DimensionError(f"theta has {theta.size} entries, expected {param_dim(cfg)}")
        weights, pos = [], 0
        for r, c in cfg.shapes:
            weights.append(theta[pos : pos + r * c].reshape(r, c).copy())
            pos += r * c
        return cls(weights, theta[pos:].copy())

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], self.v.copy())

    def check_shapes(self, cfg: NetworkConfig) -> None:
        if len(self.weights) != cfg.depth:
            raise DimensionError(f"expected {cfg.depth} weight matrices, got {len(self.weights)}")
        for l, (w, shape) in enumerate(zip(self.weights, cfg.shapes), start=1):
            if w.shape != shape:
                raise DimensionError(f"W{l} has shape {w.shape}, expected {shape}")
        if self.v.shape != (cfg.widths[-1],):
            raise DimensionError(f"v has shape {self.v.shape}, expected ({cfg.widths[-1]},)")

    def dump(self) -> str:
        """JSON weight dump: a shape header followed by row-major entries."""
        return json.dumps(
            {
                "shapes": [list(w.shape) for w in self.weights] + [[self.v.size]],
                "entries": [w.ravel().tolist() for w in self.weights] + [self.v.tolist()],
            }
        )

    @classmethod
    def load(cls, text: str) -> "NetworkParams":
        rec = json.loads(text)
        *wshapes, (nv,) = rec["shapes"]
        *wentries, ventries = rec["entries"]
        weights = [np.asarray(e, dtype=float).reshape(s) for s, e in zip(wshapes, wentries)]
        v = np.asarray(ventries, dtype=float)
        if v.size != nv:
            raise DimensionError("last-layer entry count does not match header")
        return cls(weights, v)


@dataclass
class SpectralBall:
    """``{theta : ||W_l - W0_l||_2 <= rho for all l, ||v - v0||_2 <= rho1}``."""

    center: NetworkParams
    rho: float
    rho1: float

    def __post_init__(self):
        if self.rho < 0 or self.rho1 < 0:
            raise ValueError("ball radii must be non-negative")

    def contains(self, params: NetworkParams, tol: float = 1e-7) -> bool:
        for w, w0 in zip(params.weights, self.center.weights):
            dev = w - w0
            if np.any(dev) and spectral_norm(dev) > self.rho * (1 + tol) + tol:
                return False
        return float(np.linalg.norm(params.v - self.center.v)) <= self.rho1 * (1 + tol) + tol

    @property
    def is_singleton(self) -> bool:
        return self.rho == 0 and self.rho1 == 0

    def to_record(self) -> dict:
        return {"rho": self.rho, "rho1": self.rho1}


@dataclass
class EuclideanBall:
    """Parameter ball for the linear model: ``{theta : ||theta - center||_2 <= radius}``."""

    center: np.ndarray
    radius: float

    def contains(self, theta, tol: float = 1e-9) -> bool:
        return float(np.linalg.norm(np.asarray(theta) - self.center)) <= self.radius * (1 + tol) + tol

    @property
    def is_singleton(self) -> bool:
        return self.radius == 0


@dataclass
class ForwardCache:
    alphas: list  # alpha_0 .. alpha_L
    pre: list  # pre-activations alpha~_1 .. alpha~_L
    f: float | np.ndarray = field(default=0.0)


def init_sigmas(cfg: NetworkConfig) -> list[float]:
    """Per-layer initialisation standard deviations.

    ``sigma_0^(1) = sigma1 / (2 (1 + sqrt(log m_1 / (2 m_1))))`` and, for
    ``l >= 2``, ``sigma_0^(l) = sigma1 / (1 + sqrt(m_{l-1}/m_l) + sqrt(2 log m_l / m_l))``.
    """
    m = cfg.widths
    out = [cfg.sigma1 / (2.0 * (1.0 + math.sqrt(math.log(m[0]) / (2.0 * m[0]))))]
    for l in range(1, cfg.depth):
        out.append(
            cfg.sigma1 / (1.0 + math.sqrt(m[l - 1] / m[l]) + math.sqrt(2.0 * math.log(m[l]) / m[l]))
        )
    return out


def betas(cfg: NetworkConfig, rho: float) -> np.ndarray:
    """``beta_l = sigma1 + rho / sqrt(m_l)``."""
    return cfg.sigma1 + rho / np.sqrt(np.asarray(cfg.widths, dtype=float))


def init_network(cfg: NetworkConfig, rng: RngStream) -> NetworkParams:
    """Gaussian layer weights with the scaled variances and ``v0`` uniform on the unit sphere."""
    weights = [s * rng.normal(shape) for s, shape in zip(init_sigmas(cfg), cfg.shapes)]
    v = rng.normal(cfg.widths[-1])
    nv = float(np.linalg.norm(v))
    while nv == 0.0:  # pragma: no cover - measure-zero event
        v = rng.normal(cfg.widths[-1])
        nv = float(np.linalg.norm(v))
    return NetworkParams(weights, v / nv)


def _phi(cfg, z):
    return np.maximum(z, 0.0) if cfg.activation == "relu" else np.tanh(z)


def _dphi(cfg, z):
    if cfg.activation == "relu":
        return (z > 0).astype(float)  # subgradient 0 at the kink
    t = np.tanh(z)
    return 1.0 - t * t


def _layer_scales(cfg: NetworkConfig) -> list[float]:
    if cfg.arch == "ffn":
        return [1.0 / math.sqrt(m) for m in cfg.widths]
    return [1.0 / (cfg.depth * math.sqrt(m)) for m in cfg.widths]


def _embed_inputs(cfg: NetworkConfig, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != cfg.input_dim:
        raise DimensionError(f"input has dimension {X.shape[1]}, expected {cfg.input_dim}")
    if cfg.arch == "resnet" and cfg.input_dim < cfg.widths[0]:
        X = np.concatenate([X, np.zeros((X.shape[0], cfg.widths[0] - cfg.input_dim))], axis=1)
    return X


def _check_unit(X: np.ndarray, test_mode: bool) -> None:
    if test_mode:
        return
    norms = np.linalg.norm(X, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-10):
        raise ValueError("inputs must have unit L2 norm (pass test_mode=True to relax)")


def forward_batch(cfg: NetworkConfig, params: NetworkParams, X, test_mode: bool = False) -> ForwardCache:
    """Forward pass on the rows of ``X``; cache arrays have a leading sample axis."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_unit(X, test_mode)
    a = _embed_inputs(cfg, X)
    alphas, pre = [a], []
    for W, s in zip(params.weights, _layer_scales(cfg)):
        z = (a @ W.T) * s
        h = _phi(cfg, z)
        a = h if cfg.arch == "ffn" else a + h
        pre.append(z)
        alphas.append(a)
    return ForwardCache(alphas, pre, a @ params.v)


def forward(cfg: NetworkConfig, params: NetworkParams, x, test_mode: bool = False) -> ForwardCache:
    """Single-input forward pass."""
    params.check_shapes(cfg)
    c = forward_batch(cfg, params, np.asarray(x, dtype=float)[None, :], test_mode)
    return ForwardCache([a[0] for a in c.alphas], [z[0] for z in c.pre], float(c.f[0]))


def featurizer(cache: ForwardCache) -> np.ndarray:
    """Last hidden representation ``alpha_L``; the output is ``v . alpha_L``."""
    return cache.alphas[-1]


def _backward(cfg: NetworkConfig, params: NetworkParams, cache: ForwardCache, coef: np.ndarray):
    """Reverse pass with per-sample output cotangents ``coef`` (shape ``(n,)``).

    Returns per-layer cotangents of the pre-activations, already multiplied by
    the layer scale, so that ``dW_l = sum_i delta_l[i] outer alpha_{l-1}[i]``.
    """
    delta = coef[:, None] * params.v[None, :]  # d/d alpha_L
    deltas = [None] * cfg.depth
    scales = _layer_scales(cfg)
    for l in range(cfg.depth - 1, -1, -1):
        dz = delta * _dphi(cfg, cache.pre[l]) * scales[l]
        deltas[l] = dz
        back = dz @ params.weights[l]
        delta = back if cfg.arch == "ffn" else delta + back
    return deltas


def per_sample_gradients(cfg, theta, X, y, test_mode: bool = False):
    """Per-sample squared losses ``(n,)`` and loss gradients ``(n, p)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    theta = np.asarray(theta, dtype=float)
    if isinstance(cfg, LinearConfig):
        resid = X @ theta - y
        return 0.5 * resid**2, resid[:, None] * X
    params = NetworkParams.unflatten(cfg, theta)
    cache = forward_batch(cfg, params, X, test_mode)
    resid = cache.f - y
    deltas = _backward(cfg, params, cache, resid)
    n = X.shape[0]
    blocks = [
        (d[:, :, None] * a[:, None, :]).reshape(n, -1) for d, a in zip(deltas, cache.alphas[:-1])
    ]
    blocks.append(resid[:, None] * cache.alphas[-1])
    return 0.5 * resid**2, np.concatenate(blocks, axis=1)


def weighted_gradient(cfg, theta, X, y, weights=None, test_mode: bool = False):
    """``(sum_i w_i l_i, sum_i w_i grad l_i)`` without materialising per-sample gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    w = np.full(X.shape[0], 1.0 / X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if isinstance(cfg, LinearConfig):
        resid = X @ theta - y
        return float(w @ (0.5 * resid**2)), X.T @ (w * resid)
    params = NetworkParams.unflatten(cfg, theta)
    cache = forward_batch(cfg, params, X, test_mode)
    resid = cache.f - y
    coef = w * resid
    deltas = _backward(cfg, params, cache, coef)
    blocks = [(d.T @ a).ravel() for d, a in zip(deltas, cache.alphas[:-1])]
    blocks.append(cache.alphas[-1].T @ coef)
    return float(w @ (0.5 * resid**2)), np.concatenate(blocks)


def loss_and_gradient(cfg, params, x, y: float, test_mode: bool = False):
    """Squared loss and its full stacked gradient for one sample."""
    theta = params.flatten() if isinstance(params, NetworkParams) else np.asarray(params, dtype=float)
    if isinstance(params, NetworkParams):
        params.check_shapes(cfg)
    losses, grads = per_sample_gradients(cfg, theta, np.asarray(x, dtype=float)[None, :], [y], test_mode)
    return float(losses[0]), grads[0]


# ---------------------------------------------------------------------------
# ball geometry


def _clip_spectral(dev: np.ndarray, rho: float) -> np.ndarray:
    if rho == 0:
        return np.zeros_like(dev)
    if not np.any(dev):
        return dev
    U, s, Vt = np.linalg.svd(dev, full_matrices=False)
    if s[0] <= rho:
        return dev
    return (U * np.minimum(s, rho)) @ Vt


def project_to_ball(params, ball):
    """Nearest point of the ball, layer by layer.

    Each weight deviation keeps its singular vectors with singular values
    clipped at ``rho``; the last-layer deviation is shrunk radially to norm
    ``rho1``.  Points already inside are returned unchanged.  Flat vectors
    are accepted for both ball types and returned flat.
    """
    if isinstance(ball, EuclideanBall):
        theta = np.asarray(params, dtype=float)
        dev = theta - ball.center
        nd = float(np.linalg.norm(dev))
        if nd <= ball.radius:
            return theta.copy()
        return ball.center + dev * (ball.radius / nd)
    flat = not isinstance(params, NetworkParams)
    if flat:
        params = _unflatten_like(ball.center, params)
    if len(params.weights) != len(ball.center.weights) or any(
        w.shape != w0.shape for w, w0 in zip(params.weights, ball.center.weights)
    ) or params.v.shape != ball.center.v.shape:
        raise DimensionError("parameter shapes do not match the ball center")
    weights = [
        w0 + _clip_spectral(w - w0, ball.rho) for w, w0 in zip(params.weights, ball.center.weights)
    ]
    dv = params.v - ball.center.v
    nv = float(np.linalg.norm(dv))
    v = params.v.copy() if nv <= ball.rho1 else ball.center.v + dv * (ball.rho1 / nv)
    out = NetworkParams(weights, v)
    return out.flatten() if flat else out


def _unflatten_like(center: NetworkParams, theta) -> NetworkParams:
    theta = np.asarray(theta, dtype=float)
    weights, pos = [], 0
    for w0 in center.weights:
        weights.append(theta[pos : pos + w0.size].reshape(w0.shape).copy())
        pos += w0.size
    if theta.size != pos + center.v.size:
        raise DimensionError("theta size does not match the ball center")
    return NetworkParams(weights, theta[pos:].copy())


def _random_spectral_direction(rng: RngStream, shape) -> np.ndarray:
    G = rng.normal(shape)
    return G / float(np.linalg.svd(G, compute_uv=False)[0])


def _random_unit(rng: RngStream, n: int) -> np.ndarray:
    u = rng.normal(n)
    return u / float(np.linalg.norm(u))


def boundary_point(ball: SpectralBall, rng: RngStream) -> NetworkParams:
    """Point with every deviation exactly on the ball boundary, random directions."""
    weights = [w0 + ball.rho * _random_spectral_direction(rng, w0.shape) for w0 in ball.center.weights]
    v = ball.center.v + ball.rho1 * _random_unit(rng, ball.center.v.size)
    return NetworkParams(weights, v)


def random_ball_point(ball, rng: RngStream):
    """Random point of the ball: random direction, radius fraction uniform on [0, 1].

    Returns a flat parameter vector for both ball types.
    """
    if isinstance(ball, EuclideanBall):
        n = ball.center.size
        return ball.center + ball.radius * rng.uniform() * _random_unit(rng, n)
    weights = [
        w0 + ball.rho * rng.uniform() * _random_spectral_direction(rng, w0.shape)
        for w0 in ball.center.weights
    ]
    v = ball.center.v + ball.rho1 * rng.uniform() * _random_unit(rng, ball.center.v.size)
    return NetworkParams(weights, v).flatten()


def init_spectral_check(cfg: NetworkConfig, rho: float, trials: int, rng: RngStream) -> dict:
    """Frequency over random inits that ``||W_l||_2 <= beta_l sqrt(m_l)`` at the worst ball point.

    The worst perturbation of spectral norm ``rho`` is the rank-one
    ``rho u1 v1^T`` aligned with the top singular pair of ``W0_l``, for which
    ``||W0_l + rho u1 v1^T||_2 = ||W0_l||_2 + rho`` exactly; that value is
    compared with the bound.  Returns per-layer frequencies, the stated
    probability ``1 - 2/m_l``, the binomial standard error of each frequency
    and a pass flag using a three-standard-error slack.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    beta = betas(cfg, rho)
    bound = beta * np.sqrt(np.asarray(cfg.widths, dtype=float))
    hits = np.zeros(cfg.depth)
    for t in range(trials):
        params = init_network(cfg, rng.child(t))
        for l, W in enumerate(params.weights):
            top = float(np.linalg.svd(W, compute_uv=False)[0]) if np.any(W) else 0.0
            hits[l] += top + rho <= bound[l] * (1 + 1e-12)
    freq = hits / trials
    stated = np.array([1.0 - 2.0 / m for m in cfg.widths])
    se = np.sqrt(np.clip(stated * (1 - stated), 0, None) / trials)
    return {
        "frequency": freq.tolist(),
        "stated_probability": stated.tolist(),
        "std_error": se.tolist(),
        "passed": bool(np.all(freq >= stated - 3 * se)),
        "trials": trials,
    }
