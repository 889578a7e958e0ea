import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vmtl import diffcore as dc
from vmtl.diffcore import AdamState, NonFiniteGradientError, ShapeError, Tensor

from helpers import central_difference, relative_error

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    A = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = dc.matmul(np.eye(2), A)
    np.testing.assert_array_equal(out.data, A)


def test_elu_at_minus_one():
    assert dc.elu(Tensor(-1.0)).item() == pytest.approx(-0.63212, abs=1e-5)
    assert dc.elu(Tensor(-1.0)).item() == pytest.approx(math.exp(-1) - 1, abs=1e-15)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(dc.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (g,) = dc.backward(x * x, [x])
    assert g == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_gradient():
    v = Tensor(np.array([0.3, -1.2, 2.0, 0.0]), requires_grad=True)
    (g,) = dc.backward(dc.sum_(dc.softmax(v)), [v])
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def _elu_mlp(rng, sizes):
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = Tensor(rng.standard_normal((a, b)) / math.sqrt(a), requires_grad=True)
        bias = Tensor(0.1 * rng.standard_normal(b), requires_grad=True)
        layers.append((W, bias))
    return layers


def _mlp_loss(layers, x):
    h = Tensor(x)
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = dc.elu(h)
    return dc.sum_(h * h) * 0.5


def test_three_layer_elu_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    layers = _elu_mlp(rng, [5, 7, 6, 3])
    x = rng.standard_normal((4, 5))
    params = [p for layer in layers for p in layer]
    grads = dc.backward(_mlp_loss(layers, x), params)
    worst = 0.0
    for p, g in zip(params, grads):
        for flat in range(p.size):
            idx = np.unravel_index(flat, p.shape)
            fd = central_difference(lambda: _mlp_loss(layers, x).item(), p.data, idx)
            worst = max(worst, relative_error(fd, g[idx]))
    assert worst < 1e-4


def test_adam_zero_gradient_is_a_fixed_point():
    q = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState()
    for _ in range(3):
        dc.adam_step(q, {"w": np.zeros(2)}, 1e-3, state)
    np.testing.assert_array_equal(q["w"].data, [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)


def test_adam_moments_decay_under_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState()
    dc.adam_step(p, {"w": np.array([0.5, -0.5])}, 1e-3, state)
    m0, v0 = state.m["w"].copy(), state.v["w"].copy()
    dc.adam_step(p, {"w": np.zeros(2)}, 1e-3, state)
    np.testing.assert_allclose(state.m["w"], 0.9 * m0)
    np.testing.assert_allclose(state.v["w"], 0.999 * v0)


def test_adam_first_step_value():
    p = {"x": Tensor(np.array(0.0), requires_grad=True)}
    dc.adam_step(p, {"x": np.array(1.0)}, 1e-4, AdamState())
    # bias-corrected m = v = 1 after one step, so the update is lr / (1 + eps)
    assert p["x"].data == pytest.approx(-9.99999e-5, rel=1e-5)
    assert p["x"].data == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_repeated_gradient_does_not_grow_step():
    p = {"x": Tensor(np.array(0.0), requires_grad=True)}
    s = AdamState()
    dc.adam_step(p, {"x": np.array(0.7)}, 1e-3, s)
    d1 = abs(float(p["x"].data))
    x1 = float(p["x"].data)
    dc.adam_step(p, {"x": np.array(0.7)}, 1e-3, s)
    d2 = abs(float(p["x"].data) - x1)
    assert d2 <= d1 * (1 + 1e-6)


def test_adam_rejects_non_finite_gradient():
    p = {"x": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(NonFiniteGradientError):
        dc.adam_step(p, {"x": np.array([0.0, np.nan])}, 1e-3, AdamState())


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        dc.add(np.ones((2, 3)), np.ones((4,)))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        dc.backward(Tensor(np.ones(3), requires_grad=True))


def test_glorot_limits():
    w = dc.glorot_uniform(np.random.default_rng(0), 30, 20)
    assert w.shape == (30, 20)
    assert np.abs(w).max() <= math.sqrt(6 / 50)


def test_dropout_identity_without_mask():
    a = Tensor(np.arange(4.0))
    assert dc.dropout(a, None, 0.5) is a


def test_softplus_stable_at_extremes():
    out = dc.softplus(np.array([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, math.log(2), 800.0], atol=1e-12)


# ---------------------------------------------------------------------------
# properties


def _fd_check(build, arrays, tol=1e-5):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = dc.backward(build(*tensors), tensors)
    for t, g in zip(tensors, grads):
        for flat in range(t.size):
            idx = np.unravel_index(flat, t.shape)
            fd = central_difference(lambda: build(*tensors).item(), t.data, idx)
            assert abs(fd - g[idx]) <= tol * max(1.0, abs(fd))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite), hnp.arrays(np.float64, (4,), elements=finite))
def test_broadcast_arithmetic_gradients(a, b):
    _fd_check(lambda x, y: dc.sum_(dc.tanh(x * y + x / (1.5 + y * y)) - y), [a, b])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_gradient_and_normalization(a):
    w = np.linspace(-1, 1, 10).reshape(2, 5)
    _fd_check(lambda x: dc.sum_(dc.log_softmax(x, axis=-1) * w), [a])
    np.testing.assert_allclose(np.exp(dc.log_softmax(a).data).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (3, 2), elements=finite))
def test_einsum_and_matmul_agree(a, b):
    np.testing.assert_allclose(dc.einsum("ij,jk->ik", a, b).data, dc.matmul(a, b).data, atol=1e-12)
    _fd_check(lambda x, y: dc.sum_(dc.einsum("ij,jk->ik", x, y) ** 2), [a, b])


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_indexing_sum_mean_gradients(a):
    _fd_check(lambda x: dc.mean(x[np.array([0, 2, 2])] * x[1], axis=0).sum() + dc.softplus(x).sum(), [a])
