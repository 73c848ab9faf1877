"""Dense linear algebra and random-number primitives shared by every module.

Randomness is organised as ``RngStream`` objects: a 64-bit seed plus a
64-bit stream id.  Each stream owns an independent PCG64 generator whose
state is derived with ``numpy.random.SeedSequence(seed, spawn_key=(stream_id,))``
so that (seed, stream_id) pins the draw sequence exactly and different
stream ids give statistically independent sequences.

Normal variates use NumPy's ``Generator.standard_normal``, i.e. the
256-layer ziggurat transform applied to the 64-bit PCG64 output.  That
transform is fixed for a given NumPy release, which is what makes every
experiment in this package byte-reproducible.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

__all__ = [
    "DimensionError",
    "RngStream",
    "as_dense_matrix",
    "spectral_norm",
    "sample_gaussian_vector",
    "sample_rademacher",
    "expected_gaussian_norm",
]

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when an array has an empty or inconsistent shape."""


def _stable_id(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """Reproducible random substream identified by ``(seed, stream_id)``.

    A stream is single-consumer.  Use :meth:`child` to derive named or
    indexed substreams; children never share state with the parent.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, key: int | str) -> "RngStream":
        """Derive a substream from this stream's id and ``key``.

        String keys are hashed (blake2b, 8 bytes) so named substreams such as
        ``"data"`` or ``"gaussian-outer"`` are stable across runs and
        platforms.
        """
        k = _stable_id(key) if isinstance(key, str) else int(key)
        mixed = _stable_id(f"{self.stream_id}:{k & _MASK64}")
        return RngStream(self.seed, mixed)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def signs(self, size) -> np.ndarray:
        bits = self._gen.integers(0, 2, size=size, dtype=np.int8)
        return (2.0 * bits - 1.0).astype(float)


def as_dense_matrix(m) -> np.ndarray:
    """Validate and return ``m`` as a finite 2-D float array."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionError(f"empty matrix of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def spectral_norm(m, tol: float = 1e-8, max_iters: int = 10_000) -> float:
    """Largest singular value of ``m``.

    Power iteration on ``m.T @ m`` from the normalised all-ones vector.  The
    stopping rule extrapolates the remaining error from the observed
    geometric contraction of successive estimates (Aitken style), so the
    returned value is within relative error ``tol`` rather than merely having
    a small last step.  When the iteration does not settle within
    ``max_iters`` steps, or the start vector lies in the null space, the
    value is taken from a full SVD instead.
    """
    a = as_dense_matrix(m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = a.shape[1]
    x = np.full(n, 1.0 / math.sqrt(n))
    sigma = float(np.linalg.norm(a @ x))
    if sigma == 0.0:
        return _svd_norm(a)
    prev_step = None
    prev_rate = None
    for _ in range(max_iters):
        z = a.T @ (a @ x)
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return _svd_norm(a)
        x = z / nz
        new_sigma = float(np.linalg.norm(a @ x))
        step = abs(new_sigma - sigma)
        sigma = new_sigma
        if step <= 1e-15 * sigma:
            return sigma
        rate = None
        if prev_step is not None and prev_step > 0:
            rate = step / prev_step
            # the contraction estimate is trusted only once it has settled
            if prev_rate is not None and rate < 1.0 and abs(rate - prev_rate) < 0.05:
                remaining = step * rate / (1.0 - rate)
                if remaining <= 0.1 * tol * sigma:
                    return sigma
        prev_step, prev_rate = step, rate
    return _svd_norm(a)


def _svd_norm(a: np.ndarray) -> float:
    return float(np.linalg.svd(a, compute_uv=False)[0])


def sample_gaussian_vector(rng: RngStream, dim: int) -> np.ndarray:
    """``dim`` i.i.d. standard normal draws (ziggurat over PCG64 bits)."""
    if dim < 1:
        raise DimensionError("dim must be at least 1")
    return rng.normal(int(dim))


def sample_rademacher(rng: RngStream, n: int) -> np.ndarray:
    """``n`` independent fair signs as a float vector of +1/-1."""
    if n < 1:
        raise DimensionError("n must be at least 1")
    return rng.signs(int(n))


def expected_gaussian_norm(dim: int) -> float:
    """Exact mean of the chi distribution, ``E||g||_2`` for ``g ~ N(0, I_dim)``."""
    if dim < 1:
        raise DimensionError("dim must be at least 1")
    return math.sqrt(2.0) * math.exp(gammaln((dim + 1) / 2.0) - gammaln(dim / 2.0))
