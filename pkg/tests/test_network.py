import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, random_theta, rel_err
from layertime.errors import BlowUpError
from layertime.network import (
    Batch,
    ControlTrajectory,
    Hyperparameters,
    NetworkShape,
    accuracy,
    activation,
    activation_deriv,
    check_finite,
    layer_step,
    layer_step_vjp,
    loss_and_grad,
    open_layer,
    regularizer_and_grad,
    softmax,
)



# -- shapes and containers -----------------------------------------------------

def test_shape_h_times_N_is_T():
    for N in (1, 3, 7, 64, 1000):
        s = NetworkShape(2, 4, 3, N, 5.0)
        assert abs(s.h * s.N - s.T) <= 2 * np.finfo(float).eps * s.T


@pytest.mark.parametrize("kw", [dict(N=0), dict(w=0), dict(n_f=0), dict(n_c=1), dict(T=0.0)])
def test_shape_rejects_bad_sizes(kw):
    args = dict(n_f=2, w=3, n_c=2, N=4, T=1.0)
    args.update(kw)
    with pytest.raises(ValueError):
        NetworkShape(**args)


def test_hyperparameters_validation():
    with pytest.raises(ValueError):
        Hyperparameters(w_i=-1.0)
    with pytest.raises(ValueError):
        Hyperparameters(gamma_tik=float("nan"))
    with pytest.raises(ValueError):
        Hyperparameters(epsilon_relu=0.0)


def test_batch_requires_probability_rows():
    Batch(np.zeros((2, 2)), np.array([[0.25, 0.75], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        Batch(np.zeros((1, 2)), np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        Batch(np.zeros((1, 2)), np.array([[-0.5, 1.5]]))


def test_flatten_roundtrip(rng):
    shape = NetworkShape(3, 4, 5, 6, 2.0)
    th = random_theta(shape, rng)
    back = ControlTrajectory.unflatten(th.flatten(), shape)
    for a, b in zip(th.blocks(), back.blocks()):
        assert np.array_equal(a, b)
    assert th.flatten().size == 4 * 3 + 6 * (16 + 4) + 5 * 4 + 5
    assert len(th.layers) == shape.N


def test_control_shape_checked():
    shape = NetworkShape(2, 3, 2, 4, 1.0)
    z = ControlTrajectory.zeros(shape)
    with pytest.raises(ValueError):
        ControlTrajectory(z.W_in, z.W[:3], z.b, z.W_out, z.b_out, shape)


# -- activation ------------------------------------------------------------------

def test_activation_examples():
    assert activation(1.0, 0.1) == 1.0
    assert activation(-1.0, 0.1) == 0.0
    assert activation(0.0, 0.1) == pytest.approx(0.025, abs=1e-15)
    assert activation_deriv(0.1, 0.1) == 1.0
    assert activation_deriv(-0.1, 0.1) == 0.0
    assert activation_deriv(0.0, 0.1) == 0.5


@given(st.floats(-5, 5, allow_nan=False), st.floats(1e-3, 1.0))
def test_activation_matches_piecewise_definition(x, eps):
    if x <= -eps:
        want = 0.0
    elif x >= eps:
        want = x
    else:
        want = (x + eps) ** 2 / (4 * eps)
    assert activation(x, eps) == pytest.approx(want, rel=1e-14, abs=1e-16)


@pytest.mark.parametrize("eps", [0.1, 0.5])
@pytest.mark.parametrize("sign", [-1, 1])
def test_activation_is_c1_at_band_edges(eps, sign):
    d = 1e-9
    x = sign * eps
    assert abs(activation(x - d, eps) - activation(x + d, eps)) < 1e-8
    assert abs(activation_deriv(x - d, eps) - activation_deriv(x + d, eps)) < 1e-7


def test_activation_relu_limit():
    x = np.linspace(-2, 2, 401)
    assert np.max(np.abs(activation(x, 1e-8) - np.maximum(x, 0))) <= 1e-8


@given(st.floats(-2, 2, allow_nan=False).filter(lambda x: abs(abs(x) - 0.1) > 1e-4))
def test_activation_deriv_matches_finite_difference(x):
    fd = (activation(x + 1e-6, 0.1) - activation(x - 1e-6, 0.1)) / 2e-6
    assert activation_deriv(x, 0.1) == pytest.approx(fd, abs=1e-6)


# -- layer propagator ------------------------------------------------------------

def test_layer_step_zero_weights():
    out = layer_step(np.array([1.0, 2.0]), np.zeros((2, 2)), np.zeros(2), 0.5, 0.1)
    assert np.allclose(out, [1.0125, 2.0125], atol=1e-15)


def test_layer_step_zero_h_is_identity(rng):
    u = rng.normal(size=(4, 3))
    assert np.array_equal(layer_step(u, rng.normal(size=(3, 3)), rng.normal(size=3), 0.0), u)


def test_layer_step_matches_scalar_loop(rng):
    W, b, u = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3)
    h, eps = 0.1, 0.1
    want = []
    for i in range(3):
        z = sum(W[i, j] * u[j] for j in range(3)) + b[i]
        s = 0.0 if z <= -eps else z if z >= eps else (z + eps) ** 2 / (4 * eps)
        want.append(u[i] + h * s)
    assert np.allclose(layer_step(u, W, b, h, eps), want, rtol=1e-14, atol=1e-15)


def test_layer_step_batched_and_stacked_agree(rng):
    W = rng.normal(size=(5, 3, 3))
    b = rng.normal(size=(5, 3))
    U = rng.normal(size=(5, 4, 3))
    stacked = layer_step(U, W, b, 0.2)
    for k in range(5):
        assert np.array_equal(stacked[k], layer_step(U[k], W[k], b[k], 0.2))
        for r in range(4):
            assert np.allclose(stacked[k, r], layer_step(U[k, r], W[k], b[k], 0.2), rtol=1e-15)


def test_layer_step_dimension_mismatch():
    with pytest.raises(ValueError):
        layer_step(np.zeros(3), np.zeros((2, 2)), np.zeros(2), 0.1)


def test_vjp_zero_weights_example():
    lam = np.array([1.0, 0.0, 0.0])
    du, dW, db = layer_step_vjp(np.zeros(3), np.zeros((3, 3)), np.zeros(3), 1.0, 0.1, lam)
    assert np.array_equal(du, lam)
    assert np.allclose(db, [0.5, 0, 0])
    assert np.array_equal(dW, np.zeros((3, 3)))


def test_vjp_zero_lambda(rng):
    u, W, b = rng.normal(size=3), rng.normal(size=(3, 3)), rng.normal(size=3)
    for part in layer_step_vjp(u, W, b, 0.3, 0.1, np.zeros(3)):
        assert not np.any(part)


def _vjp_fd_case(rng, batched):
    w = 3
    u = rng.uniform(-1, 1, (4, w) if batched else w)
    W, b = rng.uniform(-1, 1, (w, w)), rng.uniform(-1, 1, w)
    lam = rng.uniform(-1, 1, u.shape)
    h, eps = 0.7, 0.1
    du, dW, db = layer_step_vjp(u, W, b, h, eps, lam)

    def f_u(x):
        return np.sum(lam * layer_step(x.reshape(u.shape), W, b, h, eps))

    def f_W(x):
        return np.sum(lam * layer_step(u, x.reshape(w, w), b, h, eps))

    def f_b(x):
        return np.sum(lam * layer_step(u, W, x, h, eps))

    return [(du, central_diff(f_u, u.ravel()).reshape(u.shape)),
            (dW, central_diff(f_W, W.ravel()).reshape(w, w)),
            (db, central_diff(f_b, b.copy()))]


def test_vjp_matches_finite_differences_100_instances():
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(100):
        for got, want in _vjp_fd_case(rng, batched=k % 2 == 1):
            worst = max(worst, rel_err(got, want))
    assert worst <= 1e-5


# -- opening layer ----------------------------------------------------------------

def test_open_layer_examples(rng):
    y = rng.normal(size=4)
    assert np.array_equal(open_layer(y, np.eye(4)), y)
    assert not np.any(open_layer(y, np.zeros((3, 4))))
    W = rng.normal(size=(3, 4))
    naive = [sum(W[i, j] * y[j] for j in range(4)) for i in range(3)]
    assert np.allclose(open_layer(y, W), naive, rtol=1e-14)
    with pytest.raises(ValueError):
        open_layer(np.zeros(3), W)


# -- loss --------------------------------------------------------------------------

def test_loss_uniform_softmax(rng):
    c = np.eye(5)[2]
    loss, *_ = loss_and_grad(rng.normal(size=4), c, np.zeros((5, 4)), np.zeros(5))
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def test_loss_stationary_when_labels_equal_softmax(rng):
    W, b, u = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
    c = softmax(W @ u + b)
    _, du, dW, db = loss_and_grad(u, c, W, b)
    assert not np.any(db) and not np.any(dW) and not np.any(du)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        s, w, n_c = 3, 4, 5
        U = rng.uniform(-1, 1, (s, w))
        C = rng.dirichlet(np.ones(n_c), size=s)
        W, b = rng.uniform(-1, 1, (n_c, w)), rng.uniform(-1, 1, n_c)
        _, du, dW, db = loss_and_grad(U, C, W, b)
        worst = max(
            worst,
            rel_err(du, central_diff(lambda x: loss_and_grad(x.reshape(s, w), C, W, b)[0],
                                     U.ravel()).reshape(s, w)),
            rel_err(dW, central_diff(lambda x: loss_and_grad(U, C, x.reshape(n_c, w), b)[0],
                                     W.ravel()).reshape(n_c, w)),
            rel_err(db, central_diff(lambda x: loss_and_grad(U, C, W, x)[0], b.copy())),
        )
    assert worst <= 1e-5


def test_loss_shift_invariance(rng):
    U = rng.normal(size=(6, 3))
    C = np.eye(4)[rng.integers(0, 4, 6)]
    W, b = rng.normal(size=(4, 3)), rng.normal(size=4)
    a = loss_and_grad(U, C, W, b)
    s = loss_and_grad(U, C, W, b + 3.7)
    assert abs(a[0] - s[0]) <= 1e-12
    for x, y in zip(a[1:], s[1:]):
        assert np.max(np.abs(x - y)) <= 1e-12


def test_loss_batch_mean(rng):
    U = rng.normal(size=(3, 2))
    C = np.eye(3)[[0, 1, 2]]
    W, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    total = sum(loss_and_grad(U[k], C[k], W, b)[0] for k in range(3))
    assert loss_and_grad(U, C, W, b)[0] == pytest.approx(total / 3, rel=1e-14)


def test_loss_overflow():
    with pytest.raises(FloatingPointError, match="numerical overflow in loss"):
        loss_and_grad(np.array([np.inf, 0.0]), np.array([1.0, 0.0]), np.eye(2), np.zeros(2))


# -- regularizer ----------------------------------------------------------------------

def test_regularizer_zero():
    shape = NetworkShape(2, 3, 2, 4, 1.0)
    value, grad = regularizer_and_grad(ControlTrajectory.zeros(shape),
                                       Hyperparameters(gamma_tik=1.0, gamma_ddt=1.0))
    assert value == 0.0
    assert not np.any(grad.flatten())


def test_regularizer_closed_form():
    shape = NetworkShape(1, 1, 2, 2, 1.0)  # h = 0.5
    th = ControlTrajectory.zeros(shape)
    th.W[0, 0, 0] = 2.0
    value, _ = regularizer_and_grad(th, Hyperparameters(gamma_tik=1.0, gamma_ddt=0.0))
    assert value == pytest.approx(1.0, abs=1e-15)


def test_regularizer_gradient_finite_differences():
    rng = np.random.default_rng(11)
    shape = NetworkShape(2, 3, 3, 5, 1.3)
    hyper = Hyperparameters(gamma_tik=0.7, gamma_ddt=0.3)
    worst = 0.0
    for _ in range(100):
        th = random_theta(shape, rng, 1.0)
        _, g = regularizer_and_grad(th, hyper)
        fd = central_diff(
            lambda x: regularizer_and_grad(ControlTrajectory.unflatten(x, shape), hyper)[0],
            th.flatten())
        worst = max(worst, rel_err(g.flatten(), fd))
    assert worst <= 1e-5


# -- accuracy -------------------------------------------------------------------------

def test_accuracy_examples():
    L = np.eye(4)
    assert accuracy(L, L) == 1.0
    uniform = np.full((3, 4), 0.25)
    assert accuracy(uniform, np.tile(np.eye(4)[0], (3, 1))) == 1.0
    pred = np.eye(4)[[0, 1, 2, 0]]
    assert accuracy(pred, L) == 0.75
    with pytest.raises(ValueError, match="empty evaluation set"):
        accuracy(np.zeros((0, 4)), np.zeros((0, 4)))


def test_check_finite_reports_location():
    with pytest.raises(BlowUpError) as exc:
        check_finite(np.array([np.nan]), "forward blow-up", layer=3, level=1)
    assert exc.value.layer == 3 and exc.value.level == 1
    assert "layer 3" in str(exc.value)
