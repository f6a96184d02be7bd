import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeode import neuralnet as nn

SMALL = nn.MLPSpec((5, 4, 3, 2))


def test_default_spec():
    s = nn.MLPSpec()
    assert s.layer_widths[0] == 104 and s.layer_widths[-1] == 2
    p = nn.MLPParams.init(s, np.random.default_rng(0))
    assert p.to_flat().size == s.n_params


def test_zero_network():
    p = nn.MLPParams.zeros(nn.MLPSpec())
    assert np.array_equal(nn.forward(np.ones(104), p), [0.0, 0.0])


def test_hand_computed_toy():
    spec = nn.MLPSpec((2, 3, 1))
    p = nn.MLPParams(
        [np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([[1.0, -1.0, 0.5]])],
        [np.array([0.0, 0.0, -1.0]), np.array([0.25])],
    )
    x = np.array([0.3, -0.2])
    h = [math.tanh(0.3), math.tanh(-0.2), math.tanh(0.3 - 0.2 - 1.0)]
    expect = h[0] - h[1] + 0.5 * h[2] + 0.25
    assert nn.forward(x, p, spec)[0] == pytest.approx(expect, abs=1e-15)


def test_lipschitz_bound(rng):
    p = nn.MLPParams.init(SMALL, rng)
    L = np.prod([nn.spectral_norm(W) for W in p.weights])  # tanh is 1-Lipschitz
    for _ in range(200):
        a, b = rng.normal(size=(2, 5))
        assert np.linalg.norm(nn.forward(a, p) - nn.forward(b, p)) <= L * np.linalg.norm(a - b) * (1 + 1e-9)


def test_spectral_norm_matches_svd(rng):
    W = rng.normal(size=(7, 4))
    assert nn.spectral_norm(W) == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-8)


def test_backward_zero_upstream(rng):
    p = nn.MLPParams.init(SMALL, rng)
    _, tape = nn.forward(rng.normal(size=5), p, tape=True)
    g, gi = nn.backward(tape, np.zeros(2))
    assert all(np.all(a == 0) for a in g.arrays()) and np.all(gi == 0)


def test_single_linear_layer_outer_product(rng):
    spec = nn.MLPSpec((3, 2))
    p = nn.MLPParams.init(spec, rng)
    x = rng.normal(size=3)
    up = rng.normal(size=2)
    _, tape = nn.forward(x, p, spec, tape=True)
    g, gi = nn.backward(tape, up)
    assert np.allclose(g.weights[0], np.outer(up, x), atol=1e-15)
    assert np.allclose(g.biases[0], up)
    assert np.allclose(gi, p.weights[0].T @ up)


@pytest.mark.parametrize("act", ["tanh", "identity"])
def test_backward_finite_difference_sweep(rng, act):
    spec = nn.MLPSpec((5, 4, 3, 2), act)
    p = nn.MLPParams.init(spec, rng)
    X = rng.normal(size=(6, 5))
    U = rng.normal(size=(6, 2))
    _, tape = nn.forward(X, p, spec, tape=True)
    g, gi = nn.backward(tape, U)
    flat = p.to_flat()
    gflat = g.to_flat()
    h = 1e-6

    def L(f, X=X):
        return float(np.sum(U * nn.forward(X, nn.MLPParams.from_flat(spec, f), spec)))

    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (L(flat + e) - L(flat - e)) / (2 * h)
        assert abs(fd - gflat[i]) <= 1e-6 * max(1.0, abs(fd))
    for r in range(2):
        for j in range(5):
            E = np.zeros_like(X)
            E[r, j] = h
            fd = (L(flat, X + E) - L(flat, X - E)) / (2 * h)
            assert abs(fd - gi[r, j]) <= 1e-6 * max(1.0, abs(fd))


def test_stale_tape(rng):
    p = nn.MLPParams.init(SMALL, rng)
    _, tape = nn.forward(rng.normal(size=5), p, tape=True)
    g, _ = nn.backward(tape, np.ones(2))
    nn.rmsprop_step(p, g, nn.OptimizerState())
    with pytest.raises(nn.StaleTapeError):
        nn.backward(tape, np.ones(2))


def test_shape_errors(rng):
    p = nn.MLPParams.init(SMALL, rng)
    with pytest.raises(nn.ShapeError):
        nn.forward(np.zeros(4), p)
    with pytest.raises(nn.ShapeError):
        nn.MLPParams.from_flat(SMALL, np.zeros(3))
    with pytest.raises(nn.ShapeError):
        nn.rmsprop_step([np.zeros(2)], [np.zeros(3)], nn.OptimizerState())


def test_rmsprop_zero_gradient():
    p = [np.array([1.5, -2.0])]
    opt = nn.OptimizerState()
    opt.acc = [np.array([4.0, 1.0])]
    nn.rmsprop_step(p, [np.zeros(2)], opt)
    assert np.array_equal(p[0], [1.5, -2.0])
    assert np.allclose(opt.acc[0], [4.0 * 0.99, 0.99])


def test_rmsprop_single_step_closed_form():
    p = [np.array([0.0])]
    nn.rmsprop_step(p, [np.array([1.0])], nn.OptimizerState(lr=1e-3, rho=0.99, eps=1e-8))
    assert p[0][0] == pytest.approx(-1e-3 / (math.sqrt(0.01) + 1e-8), rel=1e-14)
    assert p[0][0] == pytest.approx(-1e-2, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=10))
def test_rmsprop_sign(gs):
    g = np.array(gs)
    p = [np.zeros_like(g)]
    nn.rmsprop_step(p, [g], nn.OptimizerState())
    assert np.all(np.sign(p[0]) == -np.sign(g))


def test_determinism_and_roundtrip():
    spec = nn.MLPSpec()
    a = nn.MLPParams.init(spec, np.random.default_rng(7))
    b = nn.MLPParams.init(spec, np.random.default_rng(7))
    assert np.array_equal(a.to_flat(), b.to_flat())
    c = nn.MLPParams.from_flat(spec, a.to_flat())
    assert all(np.array_equal(u, v) for u, v in zip(a.arrays(), c.arrays()))
    x = np.random.default_rng(1).normal(size=(4, 104))
    assert np.array_equal(nn.forward(x, a), nn.forward(x, c))


def test_normalization_roundtrip():
    n = nn.Normalization()
    assert nn.Normalization.from_dict(n.to_dict()) == n
    x = n.build_input(np.full(100, 50.0), 0.5, 10.0, [0.6, 5.0])
    assert x.shape == (1, 104) and np.allclose(x, 1.0)


def test_glorot_range():
    p = nn.MLPParams.init(nn.MLPSpec(), np.random.default_rng(0))
    for W in p.weights:
        lim = math.sqrt(6.0 / sum(W.shape))
        assert np.max(np.abs(W)) <= lim
    assert all(np.all(b == 0) for b in p.biases)
