from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradwidth.networks import (
    EuclideanBall,
    MembershipError,
    NetworkConfig,
    NetworkParams,
    SpectralBall,
    betas,
    boundary_point,
    featurizer,
    forward,
    init_network,
    init_sigmas,
    init_spectral_check,
    loss_and_gradient,
    param_dim,
    per_sample_gradients,
    project_to_ball,
    random_ball_point,
    weighted_gradient,
)
from gradwidth.numerics import DimensionError, RngStream

from oracles import fd_gradient, reference_loss


def unit(rng: RngStream, d: int) -> np.ndarray:
    x = rng.normal(d)
    return x / np.linalg.norm(x)


def random_instance(rng: RngStream, arch=None, activation=None):
    g = rng.generator
    arch = arch or ("ffn" if g.random() < 0.5 else "resnet")
    activation = activation or ("relu" if g.random() < 0.5 else "tanh")
    L = int(g.integers(1, 5))
    if arch == "ffn":
        widths = tuple(int(w) for w in g.integers(2, 33, size=L))
        d = int(g.integers(1, 9))
    else:
        widths = (int(g.integers(2, 33)),) * L
        d = int(g.integers(1, widths[0] + 1))
    cfg = NetworkConfig(arch, L, widths, d, float(0.5 + 1.5 * g.random()), activation)
    params = init_network(cfg, rng.child("init"))
    ball = SpectralBall(params, 0.5, 0.5)
    theta = NetworkParams.unflatten(cfg, random_ball_point(ball, rng.child("ball")))
    x = unit(rng.child("x"), d)
    y = float(rng.child("y").normal(1)[0])
    return cfg, theta, x, y


def fd_max_relative_error(cfg, params, x, y):
    _, grad = loss_and_gradient(cfg, params, x, y)
    ref = fd_gradient(cfg.arch, cfg.activation, params.weights, params.v, x, y)
    mask = np.abs(ref) > 1e-8
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(grad[mask] - ref[mask]) / np.abs(ref[mask])))


@pytest.mark.parametrize("arch", ["ffn", "resnet"])
@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_matches_finite_differences(arch, activation):
    rng = RngStream(2024).child(f"{arch}-{activation}")
    for k in range(5):
        cfg, params, x, y = random_instance(rng.child(k), arch, activation)
        assert fd_max_relative_error(cfg, params, x, y) <= 1e-5


def test_reference_loss_agrees_with_forward():
    rng = RngStream(5)
    for k in range(20):
        cfg, params, x, y = random_instance(rng.child(k))
        loss, _ = loss_and_gradient(cfg, params, x, y)
        assert loss == pytest.approx(float(reference_loss(cfg.arch, cfg.activation, params.weights, params.v, x, y)), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_one_by_one_closed_form(activation):
    # f = v * phi(w x) for m = d = 1; loss = (y - f)^2 / 2
    cfg = NetworkConfig("ffn", 1, (1,), 1, 1.0, activation)
    w, v, x, y = 0.7, -1.3, 1.0, 0.4
    params = NetworkParams([np.array([[w]])], np.array([v]))
    phi = max(w * x, 0.0) if activation == "relu" else math.tanh(w * x)
    dphi = float(w * x > 0) if activation == "relu" else 1 - math.tanh(w * x) ** 2
    r = v * phi - y
    loss, grad = loss_and_gradient(cfg, params, np.array([x]), y)
    assert loss == pytest.approx(0.5 * r * r)
    np.testing.assert_allclose(grad, [r * v * dphi * x, r * phi], rtol=1e-14)


def test_zero_input_test_mode():
    cfg = NetworkConfig("ffn", 3, (5, 4, 6), 3, 1.0, "tanh")
    params = init_network(cfg, RngStream(1))
    cache = forward(cfg, params, np.zeros(3), test_mode=True)
    assert all(not np.any(a) for a in cache.alphas) and cache.f == 0.0
    loss, grad = loss_and_gradient(cfg, params, np.zeros(3), 0.0, test_mode=True)
    assert loss == 0.0 and not np.any(grad)
    with pytest.raises(ValueError):
        forward(cfg, params, np.zeros(3))


def test_resnet_zero_weights_identity_path():
    cfg = NetworkConfig("resnet", 3, (5, 5, 5), 3, 1.0, "relu")
    params = init_network(cfg, RngStream(2))
    params.weights = [np.zeros_like(w) for w in params.weights]
    x = unit(RngStream(3), 3)
    cache = forward(cfg, params, x)
    padded = np.concatenate([x, np.zeros(2)])
    np.testing.assert_array_equal(featurizer(cache), padded)
    assert cache.f == pytest.approx(float(params.v @ padded))


def test_cache_invariants_and_relu_range():
    cfg = NetworkConfig("ffn", 2, (7, 5), 4, 1.0, "relu")
    params = init_network(cfg, RngStream(4))
    x = unit(RngStream(6), 4)
    cache = forward(cfg, params, x)
    np.testing.assert_array_equal(cache.alphas[0], x)
    assert cache.f == pytest.approx(float(params.v @ cache.alphas[-1]))
    assert np.all(featurizer(cache) >= 0)


def test_batch_and_weighted_gradients_agree():
    rng = RngStream(8)
    cfg, params, _, _ = random_instance(rng, "ffn", "tanh")
    X = rng.child("X").normal((6, cfg.input_dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    y = rng.child("y").normal(6)
    theta = params.flatten()
    losses, G = per_sample_gradients(cfg, theta, X, y)
    for i in range(6):
        li, gi = loss_and_gradient(cfg, params, X[i], y[i])
        assert losses[i] == pytest.approx(li)
        np.testing.assert_allclose(G[i], gi, rtol=1e-12, atol=1e-15)
    w = rng.child("w").normal(6)
    lw, gw = weighted_gradient(cfg, theta, X, y, w)
    assert lw == pytest.approx(float(w @ losses))
    np.testing.assert_allclose(gw, w @ G, rtol=1e-10, atol=1e-13)


def test_init_examples():
    cfg = NetworkConfig("ffn", 1, (1,), 1, 2.0, "relu")
    assert init_sigmas(cfg)[0] == pytest.approx(1.0)  # log 1 = 0 gives sigma1 / 2
    for k in range(10):
        c = NetworkConfig("ffn", 2, (3 + k, 4), 2, 1.0, "tanh")
        assert np.linalg.norm(init_network(c, RngStream(k)).v) == pytest.approx(1.0, abs=1e-15)


def test_init_std_moments():
    cfg = NetworkConfig("ffn", 2, (1000, 1000), 1000, 1.3, "relu")
    sig = init_sigmas(cfg)
    params = init_network(cfg, RngStream(99))
    for s, W in zip(sig, params.weights):
        assert W.std() == pytest.approx(s, rel=0.005)


def test_init_sigma_formulas():
    cfg = NetworkConfig("ffn", 3, (50, 80, 20), 10, 0.9, "relu")
    s = init_sigmas(cfg)
    assert s[0] == pytest.approx(0.9 / (2 * (1 + math.sqrt(math.log(50) / 100))))
    assert s[1] == pytest.approx(0.9 / (1 + math.sqrt(50 / 80) + math.sqrt(2 * math.log(80) / 80)))
    assert s[2] == pytest.approx(0.9 / (1 + math.sqrt(80 / 20) + math.sqrt(2 * math.log(20) / 20)))
    np.testing.assert_allclose(betas(cfg, 2.0), 0.9 + 2.0 / np.sqrt([50, 80, 20]))


def test_projection_examples():
    cfg = NetworkConfig("ffn", 2, (4, 3), 2, 1.0, "tanh")
    center = init_network(cfg, RngStream(1))
    ball = SpectralBall(center, 0.5, 0.25)
    inside = NetworkParams.unflatten(cfg, random_ball_point(ball, RngStream(2)))
    out = project_to_ball(inside, ball)
    assert all(np.array_equal(a, b) for a, b in zip(out.weights, inside.weights))
    assert np.array_equal(out.v, inside.v)

    far = center.copy()
    dv = unit(RngStream(3), 3) * 2 * ball.rho1
    far.v = center.v + dv
    u, w = unit(RngStream(4), 4), unit(RngStream(5), 2)
    far.weights[0] = center.weights[0] + 3 * ball.rho * np.outer(u, w)
    proj = project_to_ball(far, ball)
    np.testing.assert_allclose(proj.v - center.v, dv / 2, atol=1e-15)
    np.testing.assert_allclose(proj.weights[0] - center.weights[0], ball.rho * np.outer(u, w), atol=1e-14)
    assert ball.contains(proj)
    with pytest.raises(DimensionError):
        project_to_ball(NetworkParams([np.zeros((2, 2))], np.zeros(3)), ball)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 20.0))
def test_projection_lands_in_ball_and_is_idempotent(seed, scale):
    cfg = NetworkConfig("ffn", 2, (5, 4), 3, 1.0, "relu")
    rng = RngStream(seed)
    center = init_network(cfg, rng.child("c"))
    ball = SpectralBall(center, 0.3, 0.7)
    theta = center.flatten() + scale * rng.child("p").normal(param_dim(cfg))
    proj = project_to_ball(theta, ball)
    assert ball.contains(NetworkParams.unflatten(cfg, proj))
    np.testing.assert_allclose(project_to_ball(proj, ball), proj, atol=1e-12)


def test_boundary_point_and_membership():
    cfg = NetworkConfig("resnet", 2, (6, 6), 4, 1.0, "tanh")
    center = init_network(cfg, RngStream(0))
    ball = SpectralBall(center, 0.4, 0.2)
    p = boundary_point(ball, RngStream(1))
    for w, w0 in zip(p.weights, center.weights):
        assert np.linalg.svd(w - w0, compute_uv=False)[0] == pytest.approx(0.4)
    assert np.linalg.norm(p.v - center.v) == pytest.approx(0.2)
    assert ball.contains(p)
    p.weights[0] = p.weights[0] * 1.5 + 1.0
    assert not ball.contains(p)
    assert EuclideanBall(np.zeros(2), 1.0).contains(np.array([0.6, 0.8]))
    assert isinstance(MembershipError("x"), ValueError)


def test_params_dump_round_trip():
    cfg = NetworkConfig("ffn", 2, (3, 2), 2, 1.0, "relu")
    params = init_network(cfg, RngStream(7))
    back = NetworkParams.load(params.dump())
    back.check_shapes(cfg)
    assert back.flatten().tobytes() == params.flatten().tobytes()
    assert NetworkConfig.from_record(cfg.to_record()) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig("resnet", 2, (4, 5), 3, 1.0)
    with pytest.raises(ValueError):
        NetworkConfig("resnet", 1, (4,), 5, 1.0)
    with pytest.raises(ValueError):
        NetworkConfig("ffn", 2, (4,), 3, 1.0)
    with pytest.raises(ValueError):
        NetworkConfig("ffn", 1, (4,), 3, 1.0, "sigmoid")
    with pytest.raises(DimensionError):
        NetworkParams.unflatten(NetworkConfig("ffn", 1, (2,), 2, 1.0), np.zeros(3))


def test_init_spectral_check_examples():
    cfg = NetworkConfig("ffn", 1, (100,), 100, 1.0, "relu")
    rep = init_spectral_check(cfg, 0.5, 200, RngStream(1))
    assert rep["stated_probability"][0] == pytest.approx(0.98)
    assert rep["passed"]
    zero = init_spectral_check(NetworkConfig("ffn", 2, (8, 8), 8, 0.0, "relu"), 0.0, 100, RngStream(2))
    assert zero["frequency"] == [1.0, 1.0]
    small = init_spectral_check(NetworkConfig("ffn", 1, (4,), 4, 1.0, "relu"), 0.1, 300, RngStream(3))
    assert small["stated_probability"][0] == pytest.approx(0.5)
    assert small["passed"]
    with pytest.raises(ValueError):
        init_spectral_check(cfg, 0.5, 99, RngStream(0))


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_stage_is_one_lipschitz(activation):
    # each stage z -> phi(z) is 1-Lipschitz, checked on sampled pairs
    cfg = NetworkConfig("ffn", 1, (50,), 3, 1.0, activation)
    from gradwidth.networks import _phi

    rng = RngStream(12)
    for k in range(200):
        a, b = rng.child(k).normal((2, 50)) * 3
        assert np.linalg.norm(_phi(cfg, a) - _phi(cfg, b)) <= np.linalg.norm(a - b) + 1e-12
