from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradwidth.networks import LinearConfig, NetworkConfig, init_network, weighted_gradient
from gradwidth.numerics import RngStream
from gradwidth.optim import (
    TRACE_COLUMNS,
    DivergenceError,
    PopulationOracle,
    TeacherDistribution,
    gd_ratio_trace,
    gd_with_reuse,
    loglog_slope,
    population_convergence_experiment,
    population_gradient,
    quadratic_1d,
    reuse_scaling_experiment,
)


def linear_dist(d=4, noise=0.5, law="gaussian", seed=0):
    return TeacherDistribution(LinearConfig(d), RngStream(seed).normal(d), noise, law)


def closed_form_linear_iterate(X, y, theta0, eta, t):
    # eigen-decomposition of the empirical second-moment matrix
    n = X.shape[0]
    A = X.T @ X / n
    b = X.T @ y / n
    w, U = np.linalg.eigh(A)
    c = U.T @ theta0
    rhs = U.T @ b
    out = np.empty_like(c)
    for k in range(c.size):
        contraction = (1 - eta * w[k]) ** t
        if abs(w[k]) < 1e-14:
            out[k] = c[k] + eta * t * rhs[k]
        else:
            fixed = rhs[k] / w[k]
            out[k] = fixed + contraction * (c[k] - fixed)
    return U @ out


def test_zero_step_keeps_theta():
    dist = linear_dist()
    tr = gd_with_reuse(dist, np.ones(4), 0.0, 20, 16, RngStream(1))
    assert len(set(tr.hashes)) == 1
    assert len(tr) == 21
    assert np.all(np.asarray(tr.loss) == tr.loss[0])


def test_linear_matches_closed_form():
    dist = linear_dist(d=5)
    rng = RngStream(2)
    X, y = dist.sample(rng.child("data"), 32)
    theta0 = RngStream(3).normal(5)
    T, eta = 200, 0.3
    tr = gd_with_reuse(dist, theta0, eta, T, 32, rng)
    for t, snap in tr.snapshots.items():
        expected = closed_form_linear_iterate(X, y, theta0, eta, t)
        assert np.max(np.abs(snap - expected)) <= 1e-10


def test_quadratic_delta_is_mean_deviation():
    mu, n = 0.3, 32
    dist = quadratic_1d(mu, 1.0)
    rng = RngStream(4)
    X, y = dist.sample(rng.child("data"), n)
    zbar = float(np.mean(X[:, 0] * y))
    tr = gd_with_reuse(dist, np.array([2.0]), 0.5, 30, n, rng)
    assert np.allclose(tr.delta, abs(zbar - mu), atol=1e-12)
    # iterates converge to the empirical mean
    assert tr.snapshots[30][0] == pytest.approx(zbar, abs=1e-6)


def test_analytic_gradient_vanishes_at_teacher():
    for law in ("gaussian", "sphere"):
        dist = linear_dist(law=law)
        g, se = population_gradient(dist, dist.teacher)
        assert np.all(g == 0.0) and se == 0.0
    dist = linear_dist(d=4, law="sphere")
    g, _ = population_gradient(dist, dist.teacher + 1.0)
    assert np.allclose(g, 0.25)


def test_sphere_covariance_matches_monte_carlo():
    dist = linear_dist(d=3, noise=0.0, law="sphere")
    theta = np.array([1.0, -2.0, 0.5])
    g_mc, se = population_gradient(dist, theta, "fresh_mc", M=200_000, rng=RngStream(5))
    g_exact, _ = population_gradient(dist, theta)
    assert np.linalg.norm(g_mc - g_exact) <= 4 * se


def test_shared_sample_identity():
    dist = linear_dist()
    rng = RngStream(6)
    X, y = dist.sample(rng.child("s"), 24)
    theta = RngStream(7).normal(4)
    g_mc, _ = population_gradient(dist, theta, "fresh_mc", samples=(X, y))
    g_emp = weighted_gradient(dist.cfg, theta, X, y)[1]
    assert np.array_equal(g_mc, g_emp)
    tr = gd_with_reuse(dist, theta, 0.1, 10, 24, rng, "shared")
    assert max(tr.delta) == 0.0


def test_network_shared_oracle_delta_zero():
    cfg = NetworkConfig("ffn", 2, (6, 6), 3, 1.0, "tanh")
    dist = TeacherDistribution(cfg, init_network(cfg, RngStream(8)), 0.1)
    th0 = init_network(cfg, RngStream(9)).flatten()
    tr = gd_with_reuse(dist, th0, 0.2, 15, 16, RngStream(10), "shared")
    assert max(tr.delta) == 0.0
    fresh = gd_with_reuse(dist, th0, 0.2, 15, 16, RngStream(10), "fresh_mc")
    assert max(fresh.delta) > 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 12))
def test_permutation_invariance(seed, n):
    dist = linear_dist(d=3)
    X, y = dist.sample(RngStream(seed), n)
    perm = np.random.default_rng(seed).permutation(n)
    theta0 = np.zeros(3)
    a = gd_with_reuse(dist, theta0, 0.2, 10, n, RngStream(0), samples=(X, y))
    b = gd_with_reuse(dist, theta0, 0.2, 10, n, RngStream(0), samples=(X[perm], y[perm]))
    assert np.allclose(a.snapshots[10], b.snapshots[10], atol=1e-12)
    assert np.allclose(a.delta, b.delta, atol=1e-12)


def test_quadratic_ratio_alpha2_is_half():
    dist = quadratic_1d(0.3, 1.0)
    tr = gd_with_reuse(dist, np.array([3.0]), 0.1, 50, 32, RngStream(11))
    rep = gd_ratio_trace(tr, 2)
    assert rep["all_finite"]
    assert np.allclose(rep["ratios"][~rep["undefined"]], 0.5, rtol=1e-12)
    rep1 = gd_ratio_trace(tr, 1)
    theta = np.array([tr.snapshots[t][0] for t in sorted(tr.snapshots)])
    r1 = rep1["ratios"][sorted(tr.snapshots)]
    assert np.allclose(r1, 0.5 * np.abs(theta - 0.3), rtol=1e-12)
    # running max is non-decreasing
    assert np.all(np.diff(rep1["running_max"]) >= 0)


def test_ratio_undefined_at_optimum():
    dist = quadratic_1d(0.3, 0.0)
    tr = gd_with_reuse(dist, np.array([0.3]), 0.1, 5, 8, RngStream(12))
    _, undefined = tr.ratios(2)
    assert np.all(undefined)
    assert all(r["flags"] == "UNDEFINED" and r["ratio_a2"] == "" for r in tr.rows())
    with pytest.raises(ValueError):
        gd_ratio_trace(tr, 2)
    with pytest.raises(ValueError):
        gd_ratio_trace(tr, 3)


def test_divergence_guard():
    dist = linear_dist(d=3, law="gaussian")
    with pytest.raises(DivergenceError, match="reduce eta"):
        gd_with_reuse(dist, np.ones(3), 50.0, 100, 16, RngStream(13))


def test_validation_errors():
    dist = linear_dist()
    with pytest.raises(ValueError):
        gd_with_reuse(dist, np.zeros(4), -0.1, 5, 4, RngStream(0))
    with pytest.raises(ValueError):
        gd_with_reuse(dist, np.zeros(4), 0.1, 5, 0, RngStream(0))
    with pytest.raises(ValueError):
        reuse_scaling_experiment(dist, 0.1, 10, [16, 32, 64], 2, RngStream(0))
    with pytest.raises(ValueError):
        reuse_scaling_experiment(dist, 0.1, 10, [16, 32, 64, 128], 2, RngStream(0))
    cfg = NetworkConfig("ffn", 1, (4,), 2, 1.0, "tanh")
    with pytest.raises(ValueError):
        TeacherDistribution(cfg, init_network(cfg, RngStream(0)), 0.0, "gaussian")
    with pytest.raises(ValueError):
        PopulationOracle(TeacherDistribution(cfg, init_network(cfg, RngStream(0))))


def test_trace_csv_header(tmp_path):
    dist = quadratic_1d(0.0, 1.0)
    tr = gd_with_reuse(dist, np.array([1.0]), 0.5, 3, 8, RngStream(14))
    path = tmp_path / "trace.csv"
    tr.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) == 5


def test_snapshot_schedule():
    dist = linear_dist()
    tr = gd_with_reuse(dist, np.zeros(4), 0.1, 250, 8, RngStream(15))
    assert sorted(tr.snapshots) == list(range(0, 250, 3)) + [250]
    assert len(tr.hashes) == 251


def test_loglog_slope_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_slope(x, 3 * x**-0.5) == pytest.approx(-0.5)


def test_reuse_small_run_shape():
    dist = linear_dist(d=4, noise=0.5)
    rep = reuse_scaling_experiment(dist, 0.1, 32, [16, 64, 256, 1024], 4, RngStream(16), T_grid=(8, 16, 32))
    assert [r["n"] for r in rep["n_rows"]] == [16, 64, 256, 1024]
    assert rep["slope_vs_n"] < -0.3
    means = [r["max_delta"] for r in rep["T_rows"]]
    assert means == sorted(means)  # prefix maxima cannot decrease


def test_convergence_experiment_linear_rate():
    dist = linear_dist(d=3, noise=0.0, law="gaussian")
    a = population_convergence_experiment(dist, 100, 64, 2, RngStream(17), theta0=np.ones(3))
    b = population_convergence_experiment(dist, 200, 64, 2, RngStream(17), theta0=np.ones(3))
    assert a["tau_hat"][0] > 0 and a["eta"][0] == pytest.approx(1 / (4 * a["tau_hat"][0]))
    assert b["metric"] < a["metric"]
