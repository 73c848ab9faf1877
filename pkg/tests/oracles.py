"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import numpy as np


def reference_loss(arch, activation, weights, v, x, y):
    """Squared loss of an FFN or ResNet, written out directly in extended precision."""
    ld = np.longdouble
    a = np.asarray(x, dtype=ld)
    L = len(weights)
    if arch == "resnet":
        m = weights[0].shape[0]
        a = np.concatenate([a, np.zeros(m - a.size, dtype=ld)])
    for W in weights:
        W = np.asarray(W, dtype=ld)
        m = W.shape[0]
        if arch == "ffn":
            z = W.dot(a) / np.sqrt(ld(m))
        else:
            z = W.dot(a) / (ld(L) * np.sqrt(ld(m)))
        h = np.maximum(z, ld(0)) if activation == "relu" else np.tanh(z)
        a = h if arch == "ffn" else a + h
    f = np.asarray(v, dtype=ld).dot(a)
    return ld(0.5) * (ld(y) - f) ** 2


def fd_gradient(arch, activation, weights, v, x, y, step=1e-5):
    """Central finite differences of ``reference_loss`` over (vec W_1, ..., vec W_L, v)."""
    shapes = [w.shape for w in weights]
    theta = np.concatenate([w.ravel() for w in weights] + [v]).astype(np.longdouble)

    def unpack(t):
        ws, pos = [], 0
        for s in shapes:
            k = s[0] * s[1]
            ws.append(t[pos : pos + k].reshape(s))
            pos += k
        return ws, t[pos:]

    grad = np.empty(theta.size, dtype=np.longdouble)
    h = np.longdouble(step)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        grad[i] = (reference_loss(arch, activation, *unpack(tp), x, y) - reference_loss(arch, activation, *unpack(tm), x, y)) / (2 * h)
    return grad.astype(float)


def grid_linear_width(theta0, radius, x, y, G, points=10_000):
    """Brute-force ``E_g sup_theta <(theta.x - y) x, g>`` over a grid of the 1-D or 2-D ball."""
    theta0 = np.asarray(theta0, dtype=float)
    d = theta0.size
    if d == 1:
        grid = theta0 + radius * np.linspace(-1.0, 1.0, points)[:, None]
    elif d == 2:
        k = int(np.ceil(np.sqrt(points)))
        ang = np.linspace(0.0, 2 * np.pi, points // 2, endpoint=False)
        rim = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        u = np.linspace(-1.0, 1.0, k)
        box = np.stack(np.meshgrid(u, u), axis=-1).reshape(-1, 2)
        inner = box[np.linalg.norm(box, axis=1) <= 1.0][: points - rim.shape[0]]
        grid = theta0 + radius * np.concatenate([rim, inner])
    else:
        raise ValueError("grid oracle supports d in {1, 2}")
    resid = grid @ x - y  # (P,)
    proj = G @ x  # (S,)
    return float(np.mean(np.max(resid[None, :] * proj[:, None], axis=1)))


def exact_mean_abs_rademacher_sum(n: int) -> float:
    """``E|eps_1 + ... + eps_n|`` by enumeration of the binomial law."""
    from math import comb

    return sum(comb(n, k) * abs(2 * k - n) for k in range(n + 1)) / 2**n


def weighted_gaussian_norm(axes) -> float:
    """``E||a * g||_2`` from ``sqrt(q) = (1/(2 sqrt(pi))) int_0^inf (1 - e^{-t q}) t^{-3/2} dt``.

    Averaging over ``g`` turns ``e^{-t q}`` into ``prod_i (1 + 2 t a_i^2)^{-1/2}``.
    """
    from scipy.integrate import quad

    a2 = np.asarray(axes, dtype=float) ** 2

    def integrand(t):
        return -np.expm1(-0.5 * np.sum(np.log1p(2.0 * t * a2))) * t**-1.5

    head, _ = quad(integrand, 0.0, 1.0, limit=200, epsabs=1e-13)
    tail, _ = quad(integrand, 1.0, np.inf, limit=200, epsabs=1e-13)
    return (head + tail) / (2.0 * np.sqrt(np.pi))
