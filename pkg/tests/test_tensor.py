import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from vhred.tensor import (ContractError, DeterminismError, DimensionError, Tape, Tensor, backward,
                          concat, grad_check, matmul, sigmoid, softmax_xent, softplus, sum_, tanh,
                          take_rows, where_rows)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_annihilator():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_hand_value():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_pointwise_fixed_points():
    assert tanh(Tensor([0.0])).data[0] == 0.0
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    assert softplus(Tensor([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-15)


def test_pointwise_extremes_stay_finite():
    big = Tensor([-1000.0, 1000.0])
    assert np.all(np.isfinite(sigmoid(big).data))
    assert softplus(big).data.tolist() == [0.0, 1000.0]


def test_xent_uniform():
    for t in range(4):
        assert softmax_xent(Tensor(np.zeros(4)), t).data == pytest.approx(math.log(4), abs=1e-15)


def test_xent_saturated():
    v = softmax_xent(Tensor([1000.0, 0.0]), 0).data
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-300)


def test_xent_matches_mpmath():
    mpmath.mp.dps = 40
    ref = -mpmath.log(mpmath.e ** 3 / (mpmath.e + mpmath.e ** 2 + mpmath.e ** 3))
    got = float(softmax_xent(Tensor([1.0, 2.0, 3.0]), 2).data)
    assert abs(got - float(ref)) < 1e-14
    assert round(got, 5) == 0.40761


def test_xent_rejects_bad_target():
    with pytest.raises(IndexError):
        softmax_xent(Tensor(np.zeros(3)), 3)


def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = sum_(x)
    backward(loss, tape)
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (y * y).sum()
    backward(loss, tape)
    assert y.grad.tolist() == [4.0]


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_rejects_foreign_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = x.sum()
    with Tape() as other:
        pass
    with pytest.raises(ContractError):
        backward(loss, other)


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x + x * 2.0).sum()
    backward(loss, tape)
    assert x.grad.tolist() == [8.0]


def test_grad_check_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    q = Tensor(a @ a.T)
    x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    f = lambda: (x.T @ q @ x).sum()
    assert grad_check(f, [x], eps=1e-4) < 1e-6


def test_grad_check_constant_is_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    assert grad_check(lambda: Tensor(np.array(2.0)) + 0.0 * x.sum(), [x]) == 0.0


def test_grad_check_eps_range():
    x = Tensor(np.ones(2), requires_grad=True)
    for eps in (1e-8, 1e-1):
        with pytest.raises(ContractError):
            grad_check(lambda: x.sum(), [x], eps=eps)


def test_grad_check_detects_nondeterminism():
    x = Tensor(np.ones(2), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        grad_check(lambda: (x * float(rng.random())).sum(), [x])


def test_composite_graph_gradients():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    e = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)

    def f():
        h = tanh(take_rows(e, [0, 2, 2, 4]) @ w + b)
        g = sigmoid(concat([h, softplus(h)], axis=1))
        m = where_rows(np.array([True, False, True, True]), g, g * 0.5)
        return softmax_xent(m, np.array([0, 3, 7, 1])).sum()

    assert grad_check(f, [w, e, b]) < 1e-6


@given(hnp.arrays(np.float64, (3, 2), elements=finite), hnp.arrays(np.float64, (2,), elements=finite))
@settings(max_examples=50, deadline=None)
def test_broadcast_add_gradient_shapes(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with Tape() as tape:
        loss = (tanh(ta + tb) * 3.0).sum()
    backward(loss, tape)
    assert ta.grad.shape == a.shape and tb.grad.shape == b.shape
    np.testing.assert_allclose(tb.grad, ta.grad.sum(axis=0), rtol=1e-12)


@given(hnp.arrays(np.float64, (5,), elements=st.floats(-50, 50)), st.integers(0, 4))
@settings(max_examples=100, deadline=None)
def test_xent_is_nonnegative_and_consistent(logits, target):
    v = float(softmax_xent(Tensor(logits), target).data)
    assert v >= 0.0
    shifted = float(softmax_xent(Tensor(logits + 7.0), target).data)
    assert shifted == pytest.approx(v, abs=1e-9)
