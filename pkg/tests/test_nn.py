import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsfs.errors import NonFiniteError, ShapeError
from hsfs.nn import (
    Adadelta,
    Adam,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2,
    Network,
    ReLU,
    Softmax,
    Upsample2,
    cross_entropy,
    grad_check,
    loss,
    mse,
)


def dense_net(n_in=5, seed=0, hidden=4):
    rng = np.random.default_rng(seed)
    net = Network([Dense(n_in, hidden, rng), ReLU(), Dense(hidden, 3, rng), Softmax()], (n_in,), seed=seed)
    for layer in net.layers:
        if "b" in layer.params:
            layer.params["b"][:] = rng.normal(0, 0.1, layer.params["b"].shape)
    return net


# -- forward ------------------------------------------------------------------


def test_softmax_of_equal_logits_is_uniform():
    p, _ = Softmax().forward(np.zeros((1, 3), np.float32), False, None)
    np.testing.assert_allclose(p, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)


def test_relu_definition():
    y, _ = ReLU().forward(np.array([[-1.0, 2.0]], np.float32), False, None)
    assert y.tolist() == [[0.0, 2.0]]


def test_dropout_rate_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 7)).astype(np.float32)
    y, _ = Dropout(0.0).forward(x, True, np.random.default_rng(1))
    assert np.array_equal(x, y)


def test_dropout_inactive_at_inference():
    x = np.ones((3, 3), np.float32)
    y, _ = Dropout(0.5).forward(x, False, np.random.default_rng(1))
    assert np.array_equal(x, y)


def test_dropout_statistics():
    rate = 0.3
    layer = Dropout(rate)
    rng = np.random.default_rng(0)
    x = np.ones((10_000, 1), np.float32)
    y, _ = layer.forward(x, True, rng)
    dropped = np.mean(y == 0)
    assert abs(dropped - rate) < 0.02
    survivors = y[y != 0]
    np.testing.assert_allclose(survivors, 1 / (1 - rate), rtol=1e-6)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(0, 10, size=(50, 3)).astype(np.float32)
    p, _ = Softmax().forward(x, False, None)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_shape_mismatch_raises():
    net = dense_net()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4)))


def test_non_finite_activation_raises():
    net = dense_net()
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        net.forward(np.full((1, 5), np.inf))


def test_forward_deterministic_under_seed():
    x = np.random.default_rng(3).normal(size=(8, 5))
    a = Network([Dense(5, 6, np.random.default_rng(1)), Dropout(0.5)], (5,), seed=4)
    b = Network([Dense(5, 6, np.random.default_rng(1)), Dropout(0.5)], (5,), seed=4)
    assert np.array_equal(a.forward(x, training=True).output, b.forward(x, training=True).output)


def test_spatial_shape_rules():
    net = Network([Conv2D(2, 3), MaxPool2(), Conv2D(3, 3), Upsample2()], (8, 6, 2))
    assert net.shapes == [(8, 6, 2), (8, 6, 3), (4, 3, 3), (4, 3, 3), (8, 6, 3)]
    with pytest.raises(ShapeError):
        Network([MaxPool2()], (5, 4, 1))
    with pytest.raises(ShapeError):
        MaxPool2().forward(np.zeros((1, 4, 3, 1), np.float32), False, None)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    layer = Conv2D(2, 3, rng)
    layer.params["b"][:] = rng.normal(size=3)
    x = rng.normal(size=(1, 5, 4, 2))
    y, _ = layer.astype(np.float64).forward(x, False, None)
    K, b = layer.params["K"].astype(np.float64), layer.params["b"]
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    expect = np.zeros((5, 4, 3))
    for i in range(5):
        for j in range(4):
            for o in range(3):
                expect[i, j, o] = b[o] + np.sum(xp[i : i + 3, j : j + 3, :] * K[:, :, :, o])
    np.testing.assert_allclose(y[0], expect, rtol=1e-12)


# -- backward -----------------------------------------------------------------


def test_maxpool_routes_gradient_to_argmax():
    pool = MaxPool2()
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 2, 2, 1)
    y, cache = pool.forward(x, False, None)
    assert y.item() == 4.0
    g, _ = pool.backward(cache, np.ones_like(y))
    assert g.reshape(2, 2).tolist() == [[0, 0], [0, 1]]


def test_upsample_backward_sums_blocks():
    up = Upsample2()
    g = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    gx, _ = up.backward(None, g)
    assert gx.reshape(2, 2).tolist() == [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]]


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    net = dense_net()
    acts = net.forward(np.random.default_rng(0).normal(size=(4, 5)))
    grads = net.backward(acts, np.zeros_like(acts.output))
    assert all(not np.any(g) for layer in grads for g in layer.values())


def test_stale_activations_rejected():
    net = dense_net()
    acts = net.forward(np.zeros((1, 5)))
    net.bump()
    with pytest.raises(ShapeError):
        net.backward(acts, np.zeros_like(acts.output))


def test_two_layer_net_finite_differences():
    rng = np.random.default_rng(11)
    net = dense_net(5, seed=11)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 3, 6)
    report = grad_check(net, x, y, step=1e-3)
    assert report.checked > 0
    assert report.worst < 1e-4, report.summary()


# -- losses -------------------------------------------------------------------


def test_mse_values():
    assert mse(np.array([0.5], np.float32), np.array([1.0]))[0] == pytest.approx(0.25)
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    assert mse(x, x)[0] == 0.0


@pytest.mark.parametrize("label", [0, 1, 2])
def test_cross_entropy_uniform_is_ln3(label):
    p = np.full((1, 3), 1 / 3, np.float32)
    value, grad = cross_entropy(p, np.array([label]))
    assert value == pytest.approx(math.log(3), rel=1e-6)
    assert grad.shape == p.shape


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(np.full((1, 3), 1 / 3), np.array([3]))


def test_cross_entropy_clamps_zero_probability():
    value, grad = loss("cross_entropy", np.array([[1.0, 0.0, 0.0]]), np.array([1]))
    assert np.isfinite(value) and value > 0
    assert np.all(np.isfinite(grad))


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(np.zeros((2, 2), np.float32), np.zeros((2, 3)))


# -- optimizers ---------------------------------------------------------------


def _single_param_net(value):
    net = Network([Dense(1, 1)], (1,))
    net.layers[0].params["W"][:] = value
    return net


@pytest.mark.parametrize("opt", [Adam(), Adadelta()])
def test_zero_gradient_leaves_parameters(opt):
    net = dense_net()
    before = [p.copy() for _, _, p in net.parameters()]
    grads = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
    opt.step(net, grads)
    for b, (_, _, p) in zip(before, net.parameters()):
        assert np.array_equal(b, p)


def test_adam_first_step_by_hand():
    g, lr, b1, b2, eps = 0.5, 1e-3, 0.9, 0.999, 1e-8
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat, v_hat = m / (1 - b1), v / (1 - b2)
    expected = 1.0 - lr * m_hat / (math.sqrt(v_hat) + eps)

    net = _single_param_net(1.0)
    Adam(lr, b1, b2, eps).step(net, [{"W": np.array([[g]], np.float32), "b": np.zeros(1, np.float32)}])
    w = net.layers[0].params["W"].item()
    assert w == pytest.approx(expected, abs=1e-7)
    # bias-corrected first step is a sign step of size lr
    assert 1.0 - w == pytest.approx(lr, rel=1e-4)


def test_adadelta_rho_zero_by_hand():
    eps = 1e-6
    g1, g2 = 0.8, -0.3
    dx1 = -math.sqrt(0 + eps) / math.sqrt(g1 * g1 + eps) * g1
    dx2 = -math.sqrt(dx1 * dx1 + eps) / math.sqrt(g2 * g2 + eps) * g2

    net = _single_param_net(0.0)
    opt = Adadelta(lr=1.0, rho=0.0, eps=eps)
    for g in (g1, g2):
        opt.step(net, [{"W": np.array([[g]], np.float32), "b": np.zeros(1, np.float32)}])
    assert net.layers[0].params["W"].item() == pytest.approx(dx1 + dx2, rel=1e-5)


def test_optimizer_shape_mismatch():
    net = _single_param_net(0.0)
    with pytest.raises(ShapeError):
        Adam().step(net, [{"W": np.zeros((2, 1), np.float32), "b": np.zeros(1, np.float32)}])


def test_optimizer_rejects_non_finite_update():
    net = _single_param_net(0.0)
    with pytest.raises(NonFiniteError):
        Adam().step(net, [{"W": np.array([[np.nan]], np.float32), "b": np.zeros(1, np.float32)}])


# -- gradient checking ---------------------------------------------------------


def test_grad_check_dense_relu_softmax_8_inputs():
    rng = np.random.default_rng(5)
    net = dense_net(8, seed=5, hidden=6)
    report = grad_check(net, rng.normal(size=(5, 8)), rng.integers(0, 3, 5))
    assert report.passed, report.summary()


def test_grad_check_conv_pool_upsample_mse():
    rng = np.random.default_rng(2)
    net = Network([Conv2D(2, 3, rng), ReLU(), MaxPool2(), Conv2D(3, 2, rng), Upsample2(), Conv2D(2, 1, rng)],
                  (8, 8, 2))
    report = grad_check(net, rng.normal(size=(2, 8, 8, 2)), rng.normal(size=(2, 8, 8, 1)), loss="mse",
                        check_input=True)
    assert report.passed, report.summary()


def test_grad_check_identity_net_is_exact():
    net = Network([], (4,))
    report = grad_check(net, np.ones((2, 4)), np.zeros((2, 4)), loss="mse")
    assert report.worst == 0.0 and report.passed


def test_grad_check_training_mode_dropout():
    rng = np.random.default_rng(9)
    net = Network([Dense(6, 8, rng), Dropout(0.4), ReLU(), Dense(8, 3, rng), Softmax()], (6,))
    report = grad_check(net, rng.normal(size=(4, 6)), rng.integers(0, 3, 4), training=True)
    assert report.passed, report.summary()


def test_grad_check_detects_wrong_gradient():
    class BrokenReLU(ReLU):
        def backward(self, mask, grad_y):
            return 2 * grad_y * mask, {}

    rng = np.random.default_rng(0)
    net = Network([Dense(4, 5, rng), BrokenReLU(), Dense(5, 3, rng), Softmax()], (4,))
    report = grad_check(net, rng.normal(size=(3, 4)), rng.integers(0, 3, 3))
    assert not report.passed


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dense_gradients_random_seeds(seed):
    rng = np.random.default_rng(seed)
    n_in = int(rng.integers(2, 7))
    net = dense_net(n_in, seed=seed, hidden=int(rng.integers(2, 6)))
    report = grad_check(net, rng.normal(size=(4, n_in)), rng.integers(0, 3, 4), check_input=True)
    assert report.passed, report.summary()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_spatial_gradients_random_seeds(seed):
    rng = np.random.default_rng(seed)
    net = Network([Conv2D(2, 2, rng), ReLU(), MaxPool2(), Upsample2(), Conv2D(2, 1, rng)], (4, 4, 2))
    report = grad_check(net, rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(2, 4, 4, 1)), loss="mse",
                        check_input=True)
    assert report.passed, report.summary()
