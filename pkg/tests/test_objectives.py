import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from byzsgd.objectives import (
    QuadraticSaddle, SeparableDoubleWell, SyntheticSoftmax, certify_sosp, hessian_min_eig, make_objective,
)
from byzsgd.vecmath import RngStream, norm

OBJECTIVES = [
    QuadraticSaddle(delta=0.1, d=5),
    QuadraticSaddle(delta=-0.7, d=3),
    SeparableDoubleWell(d=4),
    SyntheticSoftmax(d=6, classes=3),
    SyntheticSoftmax(d=8, classes=2, samples=40, data_seed=3),
]
IDS = ["saddle", "bowl", "double_well", "softmax3", "softmax2"]


def fd_grad(obj, x, h=1e-5):
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (obj.eval(x + e) - obj.eval(x - e)) / (2 * h)
    return g


def test_saddle_values():
    f = QuadraticSaddle(delta=0.1, d=2)
    assert f.eval(np.zeros(2)) == 0.0
    assert f.eval(np.array([1.0, 1.0])) == pytest.approx(0.45, abs=1e-15)
    assert np.array_equal(f.grad(np.zeros(2)), [0.0, 0.0])
    assert np.allclose(f.grad(np.array([1.0, 1.0])), [-0.1, 1.0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("delta,d", [(0.1, 4), (0.3, 5)])
def test_saddle_min_eig_is_minus_delta(delta, d):
    f = QuadraticSaddle(delta=delta, d=d)
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert hessian_min_eig(f, rng.standard_normal(d)) == pytest.approx(-delta, abs=1e-15)


def test_double_well_minimum_and_maximum():
    w = SeparableDoubleWell(d=3)
    # w(+-1) = 1/2 + 2/2 = 1.5 per coordinate.
    for x in (np.ones(3), -np.ones(3), np.array([1.0, -1.0, 1.0])):
        assert w.eval(x) == pytest.approx(4.5, abs=1e-14)
        assert norm(w.grad(x)) == pytest.approx(0.0, abs=1e-14)
    rng = np.random.default_rng(0)
    assert all(w.eval(np.ones(3) + 0.05 * rng.standard_normal(3)) > 4.5 for _ in range(20))
    # At u = 0: w''(0) = 1 - 4 = -3, the other coordinates at the minimum have w''(1) = 1 - 4*(-2)/8 = 2.
    x = np.array([0.0, 1.0, -1.0])
    assert hessian_min_eig(w, x) == pytest.approx(-3.0, abs=1e-14)
    assert np.allclose(np.diag(w.hessian(x)), [-3.0, 2.0, 2.0], atol=1e-14)


def test_fd_hessian_matches_closed_form_on_softmax_and_well():
    w = SeparableDoubleWell(d=3)
    x = np.array([0.2, -0.4, 1.3])
    fd = super(SeparableDoubleWell, w).hessian(x)
    assert np.allclose(fd, w.hessian(x), atol=1e-6)
    s = SyntheticSoftmax(d=6)
    H = s.hessian(np.zeros(6))
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H)[0] > -1e-6  # convex loss


@pytest.mark.parametrize("obj", OBJECTIVES, ids=IDS)
def test_finite_differences_match_gradient(obj):
    rng = np.random.default_rng(42)
    for _ in range(100):
        x = rng.uniform(-3, 3, obj.d)
        g = obj.grad(x)
        assert norm(fd_grad(obj, x) - g) <= 1e-5 * max(norm(g), 1.0)


@pytest.mark.parametrize("obj", OBJECTIVES, ids=IDS)
def test_gradient_lipschitz(obj):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x, y = rng.uniform(-4, 4, (2, obj.d))
        assert norm(obj.grad(x) - obj.grad(y)) <= obj.L * norm(x - y) * (1 + 1e-12)


def test_double_well_lipschitz_constant_is_tight():
    w = SeparableDoubleWell(d=1)
    u = np.linspace(-5, 5, 200001)
    from byzsgd.objectives import _well_d2
    assert np.max(np.abs(_well_d2(u))) == pytest.approx(w.L, abs=1e-9)
    # The Hessian-Lipschitz constant bounds the numerical third derivative.
    third = np.diff(_well_d2(u)) / np.diff(u)
    assert np.max(np.abs(third)) <= w.L2


@pytest.mark.parametrize("obj", OBJECTIVES, ids=IDS)
def test_stochastic_gradient_inside_noise_ball(obj):
    x = np.linspace(-1, 1, obj.d)
    g = obj.grad(x)
    worst = max(norm(obj.stochastic_grad(x, RngStream(11, 0, t)) - g) for t in range(20000))
    assert worst <= obj.V * (1 + 1e-12)


def test_stochastic_gradient_noise_ball_1e5_draws():
    f = QuadraticSaddle(delta=0.1, d=10, V=0.5)
    gen = np.random.default_rng(3)
    draws = np.array([f.noise(gen) for _ in range(100000)])
    assert np.max(np.linalg.norm(draws, axis=1)) <= 0.5 * (1 + 1e-12)
    # Mean zero: each coordinate's sample mean within 5 standard errors (variance V^2/(d+2)).
    se = 0.5 / math.sqrt(12) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0)) < 5 * se)


def test_zero_noise_gives_exact_gradient():
    f = QuadraticSaddle(delta=0.1, d=3, V=0.0)
    x = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(f.stochastic_grad(x, RngStream(0, 1, 2)), f.grad(x))


def test_stochastic_gradient_is_a_pure_function_of_stream():
    f = SeparableDoubleWell(d=4)
    x = np.full(4, 0.3)
    s = RngStream(5, 2, 9)
    assert np.array_equal(f.stochastic_grad(x, s), f.stochastic_grad(x, s))


def test_minibatch_estimator_common_random_numbers():
    f = QuadraticSaddle(delta=0.1, d=3)
    f_r = f.minibatch_estimator(RngStream(0, "master", 4), 10)
    x, y = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.0, -1.0])
    # Same samples at every point: the estimate differs from f by a fixed linear term.
    lin = (f_r(x) - f.eval(x)) - (f_r(y) - f.eval(y))
    assert f_r(2 * x - y) - f.eval(2 * x - y) == pytest.approx((f_r(x) - f.eval(x)) + lin, abs=1e-12)
    with pytest.raises(ValueError):
        f.minibatch_estimator(RngStream(0, 0, 0), 0)


def test_dimension_mismatch_rejected():
    for obj in OBJECTIVES:
        with pytest.raises(ValueError):
            obj.eval(np.zeros(obj.d + 1))
        with pytest.raises(ValueError):
            obj.grad(np.zeros(obj.d + 1))
        with pytest.raises(ValueError):
            hessian_min_eig(obj, np.zeros(obj.d + 1))


def test_hessian_tol_must_be_positive():
    with pytest.raises(ValueError):
        hessian_min_eig(SyntheticSoftmax(d=6), np.zeros(6), tol=0.0)


def test_certify_examples():
    c = certify_sosp(QuadraticSaddle(delta=0.1, d=3), np.zeros(3), 0.04)
    assert (c.grad_norm, c.hessian_min_eig, c.satisfied) == (0.0, pytest.approx(-0.1), True)
    assert not certify_sosp(QuadraticSaddle(delta=0.5, d=3), np.zeros(3), 0.04).satisfied
    bowl = QuadraticSaddle(delta=-2.0, d=4)
    assert certify_sosp(bowl, np.full(4, 1e-3), 0.01).satisfied
    assert not certify_sosp(bowl, np.full(4, 1.0), 0.01).satisfied
    with pytest.raises(ValueError):
        certify_sosp(bowl, np.zeros(4), 0.0)


@given(st.floats(-2, 2), st.floats(1e-4, 1.0), st.floats(0, 10), st.integers(0, 3))
def test_certify_monotone_in_epsilon(scale, eps, extra, which):
    obj = [QuadraticSaddle(delta=0.3, d=3), SeparableDoubleWell(d=3), QuadraticSaddle(delta=-1.0, d=3),
           SyntheticSoftmax(d=3, classes=3)][which]
    x = scale * np.array([0.1, -0.2, 0.05])
    if certify_sosp(obj, x, eps).satisfied:
        assert certify_sosp(obj, x, eps + extra).satisfied


def test_softmax_label_flip_is_permutation():
    s = SyntheticSoftmax(d=6, classes=3)
    f = s.flipped()
    assert f is s.flipped()
    assert np.array_equal(f.targets, 2 - s.labels)
    assert np.array_equal(f.X, s.X)
    x = np.linspace(-1, 1, 6)
    assert not np.allclose(f.grad(x), s.grad(x))
    with pytest.raises(ValueError):
        SyntheticSoftmax(d=6, classes=3, label_map=(0, 0, 1))
    with pytest.raises(ValueError):
        SyntheticSoftmax(d=7, classes=3)


def test_make_objective():
    assert isinstance(make_objective("quadratic_saddle", 4, delta=0.2), QuadraticSaddle)
    assert make_objective("quadratic_saddle", 4).delta == 0.1
    assert isinstance(make_objective("double_well", 2, V=0.5), SeparableDoubleWell)
    s = make_objective("softmax", 9, classes=3, samples=30, data_seed=1)
    assert (s.classes, s.samples, s.features) == (3, 30, 3)
    assert s.describe()["kind"] == "softmax"
    with pytest.raises(ValueError):
        make_objective("rosenbrock", 2)
