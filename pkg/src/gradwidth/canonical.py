"""Structured sets with known support functions and Gaussian widths.

Every set exposes ``sup_{x in S} <x, g>`` in closed form, which makes these
sets exact references for the Monte-Carlo width machinery.  Support
functions are vectorised: ``g`` may be a single vector or a ``(samples, dim)``
array, and composite sets (unions, Minkowski sums) evaluate all parts on the
same Gaussian rows.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence, Union as TUnion

import numpy as np
from scipy import integrate

from .numerics import DimensionError, RngStream, expected_gaussian_norm

__all__ = [
    "L2Ball",
    "Ellipsoid",
    "KSupportBall",
    "FiniteCloud",
    "Union",
    "MinkowskiSum",
    "CanonicalSet",
    "WidthEstimate",
    "BOUND_CONVENTION",
    "support_function",
    "mc_width",
    "exact_width",
    "analytic_width_bound",
    "projection_width_check",
    "ksupport_norm",
    "ksupport_support_pga",
    "set_to_record",
    "set_from_record",
]

BOUND_CONVENTION = "all symbolic constants = 1"


@dataclass(frozen=True)
class L2Ball:
    dim: int
    radius: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("dim must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class Ellipsoid:
    """``{a * u : ||u||_2 <= 1}`` with semi-axes ``a`` (zeros allowed)."""

    axes: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in self.axes)
        if not a:
            raise DimensionError("ellipsoid needs at least one axis")
        if any(x < 0 or not math.isfinite(x) for x in a):
            raise ValueError("semi-axes must be finite and non-negative")
        object.__setattr__(self, "axes", a)

    @property
    def dim(self) -> int:
        return len(self.axes)


@dataclass(frozen=True)
class KSupportBall:
    dim: int
    k: int
    radius: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("dim must be >= 1")
        if not 1 <= self.k <= self.dim:
            raise ValueError(f"k must satisfy 1 <= k <= dim, got k={self.k}, dim={self.dim}")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class FiniteCloud:
    points: np.ndarray = field(compare=False)

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.points, dtype=float))
        if p.shape[0] == 0 or p.shape[1] == 0:
            raise DimensionError("cloud needs at least one point of positive dimension")
        object.__setattr__(self, "points", p)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class Union:
    parts: tuple

    def __post_init__(self):
        _check_parts(self.parts)
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def dim(self) -> int:
        return self.parts[0].dim


@dataclass(frozen=True)
class MinkowskiSum:
    parts: tuple

    def __post_init__(self):
        _check_parts(self.parts)
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def dim(self) -> int:
        return self.parts[0].dim


CanonicalSet = TUnion[L2Ball, Ellipsoid, KSupportBall, FiniteCloud, Union, MinkowskiSum]


def _check_parts(parts: Sequence) -> None:
    if len(parts) == 0:
        raise ValueError("composite set needs at least one part")
    dims = {p.dim for p in parts}
    if len(dims) != 1:
        raise DimensionError(f"parts have different dimensions: {sorted(dims)}")


@dataclass
class WidthEstimate:
    value: float
    std_error: float
    outer_samples: int
    inner_diagnostics: dict | None = None

    def to_record(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "outer_samples": self.outer_samples,
            "inner_diagnostics": self.inner_diagnostics,
        }


def support_function(s: CanonicalSet, g) -> np.ndarray | float:
    """Exact ``sup_{x in s} <x, g>``; rows of a 2-D ``g`` are evaluated independently."""
    g = np.asarray(g, dtype=float)
    single = g.ndim == 1
    G = np.atleast_2d(g)
    if G.shape[1] != s.dim:
        raise DimensionError(f"g has dimension {G.shape[1]}, set has dimension {s.dim}")
    out = _support(s, G)
    return float(out[0]) if single else out


def _support(s, G: np.ndarray) -> np.ndarray:
    if isinstance(s, L2Ball):
        return s.radius * np.linalg.norm(G, axis=1)
    if isinstance(s, Ellipsoid):
        return np.linalg.norm(G * np.asarray(s.axes), axis=1)
    if isinstance(s, KSupportBall):
        sq = np.sort(G * G, axis=1)[:, ::-1]
        return s.radius * np.sqrt(sq[:, : s.k].sum(axis=1))
    if isinstance(s, FiniteCloud):
        return (G @ s.points.T).max(axis=1)
    if isinstance(s, Union):
        return np.max([_support(p, G) for p in s.parts], axis=0)
    if isinstance(s, MinkowskiSum):
        return np.sum([_support(p, G) for p in s.parts], axis=0)
    raise TypeError(f"unsupported set type {type(s).__name__}")


def _estimate(values: np.ndarray, diagnostics: dict | None = None) -> WidthEstimate:
    n = values.shape[0]
    std = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return WidthEstimate(float(np.mean(values)), std / math.sqrt(n), n, diagnostics)


def mc_width(s: CanonicalSet, rng: RngStream, samples: int) -> WidthEstimate:
    """Monte-Carlo Gaussian width with the standard error of the mean."""
    if samples < 2:
        raise ValueError("samples must be >= 2")
    G = rng.normal((samples, s.dim))
    return _estimate(_support(s, G))


def _weighted_gaussian_norm(axes: np.ndarray) -> float:
    # E sqrt(sum a_i^2 g_i^2) from sqrt(s) = (4 pi)^(-1/2) int_0^inf (1 - e^{-ts}) t^{-3/2} dt
    # and E exp(-t a^2 g^2) = (1 + 2 t a^2)^(-1/2).
    a2 = np.asarray(axes, dtype=float) ** 2
    a2 = a2[a2 > 0]
    if a2.size == 0:
        return 0.0

    def integrand(t: float) -> float:
        if t == 0.0:
            return 0.0
        log_mgf = -0.5 * np.log1p(2.0 * t * a2).sum()
        return -math.expm1(log_mgf) * t ** -1.5

    scale = 1.0 / a2.max()
    parts = [
        integrate.quad(integrand, 0.0, scale, limit=200, epsabs=0, epsrel=1e-12)[0],
        integrate.quad(integrand, scale, np.inf, limit=200, epsabs=0, epsrel=1e-12)[0],
    ]
    return sum(parts) / (2.0 * math.sqrt(math.pi))


def exact_width(s: CanonicalSet) -> float:
    """Closed-form (or one-dimensional quadrature) Gaussian width where known.

    Supported: L2 balls (chi mean), ellipsoids (quadrature of the Laplace
    representation of the square root), finite clouds with one point or two
    antipodal points, and Minkowski sums of supported parts.
    """
    if isinstance(s, L2Ball):
        return s.radius * expected_gaussian_norm(s.dim)
    if isinstance(s, Ellipsoid):
        return _weighted_gaussian_norm(np.asarray(s.axes))
    if isinstance(s, FiniteCloud):
        pts = s.points
        if pts.shape[0] == 1:
            return 0.0
        if pts.shape[0] == 2:
            # E max(<a,g>, <b,g>) = E|<a-b, g>| / 2 since the mean term vanishes
            return float(np.linalg.norm(pts[0] - pts[1])) / 2.0 * math.sqrt(2.0 / math.pi)
    if isinstance(s, MinkowskiSum):
        return sum(exact_width(p) for p in s.parts)
    raise TypeError(f"no closed-form width for {type(s).__name__}")


def analytic_width_bound(s: CanonicalSet) -> float:
    """Closed-form upper bound on the width with every symbolic constant set to 1.

    * ``Ellipsoid``: ``||a||_2``.
    * ``L2Ball``: ``r sqrt(dim)``.
    * ``KSupportBall(k, r)``: with ``c0 = r / sqrt(k)``,
      ``c0 k sqrt(log(dim/k)) + c0 k``.  The additive term makes ``k = dim``
      reduce to the L2-ball bound ``r sqrt(dim)``.  This is an
      order-of-magnitude bound; callers fit the constant, never assume it.
    * ``Union`` of finite clouds with largest point norm ``B``:
      ``B (sqrt(2 log N) + max_j min(sqrt(dim), sqrt(2 log |cloud_j|)))``.
    """
    if isinstance(s, Ellipsoid):
        return float(np.linalg.norm(s.axes))
    if isinstance(s, L2Ball):
        return s.radius * math.sqrt(s.dim)
    if isinstance(s, KSupportBall):
        c0 = s.radius / math.sqrt(s.k)
        return c0 * s.k * math.sqrt(math.log(s.dim / s.k)) + c0 * s.k
    if isinstance(s, Union) and all(isinstance(p, FiniteCloud) for p in s.parts):
        big = max(float(np.linalg.norm(p.points, axis=1).max()) for p in s.parts)
        per_part = max(
            min(math.sqrt(s.dim), math.sqrt(2.0 * math.log(p.points.shape[0]))) for p in s.parts
        )
        return big * (math.sqrt(2.0 * math.log(len(s.parts))) + per_part)
    raise TypeError(f"no analytic bound for {type(s).__name__}")


def projection_width_check(
    cloud: FiniteCloud, split: int, rng: RngStream, samples: int
) -> tuple[WidthEstimate, WidthEstimate, WidthEstimate]:
    """Widths of a cloud and of its two coordinate blocks under shared draws.

    The first ``split`` coordinates form block one.  Because the same Gaussian
    rows feed all three estimates, ``whole <= part1 + part2`` holds draw by
    draw, not only in expectation.
    """
    if not 0 < split < cloud.dim:
        raise ValueError(f"split must satisfy 0 < split < {cloud.dim}, got {split}")
    if samples < 2:
        raise ValueError("samples must be >= 2")
    G = rng.normal((samples, cloud.dim))
    pts = cloud.points
    whole = (G @ pts.T).max(axis=1)
    p1 = (G[:, :split] @ pts[:, :split].T).max(axis=1)
    p2 = (G[:, split:] @ pts[:, split:].T).max(axis=1)
    return _estimate(whole), _estimate(p1), _estimate(p2)


# ---------------------------------------------------------------------------
# k-support norm and a brute-force oracle for its support function


def ksupport_norm(x, k: int) -> float:
    """k-support norm via the sorted-magnitude closed form.

    With ``z`` the magnitudes sorted decreasingly (``z_0 = inf``), find the
    unique ``r in {0..k-1}`` with ``z_{k-r-1} > T_r / (r+1) >= z_{k-r}`` where
    ``T_r = sum_{i >= k-r} z_i``; then the squared norm is
    ``sum_{i < k-r} z_i^2 + T_r^2 / (r+1)`` (1-based indices).
    """
    z = np.sort(np.abs(np.asarray(x, dtype=float)))[::-1]
    d = z.size
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= len(x)")
    zpad = np.concatenate(([np.inf], z))  # zpad[i] = z_i, 1-based
    for r in range(k):
        head = k - r - 1
        tail_sum = zpad[k - r :].sum()
        avg = tail_sum / (r + 1)
        if zpad[head] > avg >= zpad[k - r] - 1e-15 * max(1.0, avg):
            return math.sqrt(float((zpad[1 : head + 1] ** 2).sum() + tail_sum**2 / (r + 1)))
    raise ArithmeticError("no admissible split found in k-support norm evaluation")


def _project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Row-wise Euclidean projection of non-negative rows onto ``{x >= 0, sum x <= radius}``."""
    v = np.atleast_2d(v)
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    idx = np.arange(1, v.shape[1] + 1)
    active = u * idx > css - radius
    rho = v.shape[1] - 1 - np.argmax(active[:, ::-1], axis=1)
    theta = (css[np.arange(v.shape[0]), rho] - radius) / (rho + 1.0)
    theta = np.where(v.sum(axis=1) <= radius, 0.0, theta)
    return np.maximum(v - theta[:, None], 0.0)


def ksupport_support_pga(
    g,
    k: int,
    radius: float,
    rng: RngStream,
    restarts: int = 50,
    steps: int = 400,
) -> float:
    """Maximise ``<x, g>`` over the k-support ball by projected gradient ascent.

    The ball is parametrised by its infimal-convolution definition: ``x`` is
    a sum of pieces ``u_S`` supported on the ``k``-subsets ``S`` with
    ``sum_S ||u_S||_2 <= radius``.  Projection onto that constraint shrinks
    the vector of piece norms onto the l1 ball.  All restarts run together
    from random feasible points and the best final objective is returned.
    """
    g = np.asarray(g, dtype=float)
    d = g.size
    supports = [list(S) for S in itertools.combinations(range(d), k)]
    gs = np.stack([g[S] for S in supports])  # (n_supp, k)
    n_supp = gs.shape[0]
    scale = float(np.linalg.norm(g)) or 1.0

    u = rng.normal((restarts, n_supp, k))
    norms = np.linalg.norm(u, axis=2)
    w = rng.uniform((restarts, n_supp))
    w *= (radius * rng.uniform((restarts, 1))) / w.sum(axis=1, keepdims=True)
    u *= (w / np.maximum(norms, 1e-300))[:, :, None]

    for t in range(steps):
        # growing steps: the objective is linear, so late iterates only need alignment
        u = u + (radius / scale) * (1.0 + t) * gs[None]
        norms = np.linalg.norm(u, axis=2)
        shrunk = _project_l1_ball(norms, radius)
        u *= np.divide(shrunk, norms, out=np.zeros_like(norms), where=norms > 0)[:, :, None]
    return float(np.einsum("rsk,sk->r", u, gs).max())


# ---------------------------------------------------------------------------
# config records


def set_to_record(s: CanonicalSet) -> dict[str, Any]:
    if isinstance(s, L2Ball):
        return {"variant": "l2_ball", "dim": s.dim, "radius": s.radius}
    if isinstance(s, Ellipsoid):
        return {"variant": "ellipsoid", "axes": list(s.axes)}
    if isinstance(s, KSupportBall):
        return {"variant": "k_support_ball", "dim": s.dim, "k": s.k, "radius": s.radius}
    if isinstance(s, FiniteCloud):
        return {"variant": "finite_cloud", "points": s.points.tolist()}
    if isinstance(s, Union):
        return {"variant": "union", "parts": [set_to_record(p) for p in s.parts]}
    if isinstance(s, MinkowskiSum):
        return {"variant": "minkowski_sum", "parts": [set_to_record(p) for p in s.parts]}
    raise TypeError(f"unsupported set type {type(s).__name__}")


def set_from_record(rec: dict[str, Any]) -> CanonicalSet:
    kind = rec.get("variant")
    if kind == "l2_ball":
        return L2Ball(int(rec["dim"]), float(rec["radius"]))
    if kind == "ellipsoid":
        return Ellipsoid(tuple(rec["axes"]))
    if kind == "k_support_ball":
        return KSupportBall(int(rec["dim"]), int(rec["k"]), float(rec["radius"]))
    if kind == "finite_cloud":
        return FiniteCloud(np.asarray(rec["points"], dtype=float))
    if kind == "union":
        return Union(tuple(set_from_record(p) for p in rec["parts"]))
    if kind == "minkowski_sum":
        return MinkowskiSum(tuple(set_from_record(p) for p in rec["parts"]))
    raise ValueError(f"unknown set variant {kind!r}")
