import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from actionloc import tensor as T
from actionloc.tensor import DomainError, ShapeError, Tensor, grad_check, no_grad, precision


def test_elementwise_examples():
    assert np.allclose(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.leaky_relu(Tensor(-2.0), 0.1).item() == pytest.approx(-0.2)


def test_matmul_examples():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    assert np.array_equal(T.matmul(a, a.transpose()).data, [[5, 11], [11, 25]])
    z = T.matmul(T.zeros((2, 3)), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    assert z.shape == (2, 4) and not z.data.any()


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_softmax_rows_examples(double):
    assert np.allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert np.allclose(T.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]])
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DomainError):
        T.softmax_rows(Tensor([[np.inf, 0.0]]))


def test_layout_examples():
    x = Tensor(np.arange(6).reshape(2, 3))
    assert np.array_equal(x.reshape(6).data, np.arange(6))
    c = T.concat([T.ones((3, 4, 4)), T.zeros((5, 4, 4))], axis=0)
    assert c.shape == (8, 4, 4)
    assert T.ones((2, 2)).sum().item() == 4
    with pytest.raises(ShapeError):
        T.concat([T.ones((3, 4, 4)), T.ones((5, 4, 3))], axis=0)


def test_domain_errors():
    with pytest.raises(DomainError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(DomainError):
        T.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_backward_examples(double):
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [2, 4, 6])

    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0, 6.0], requires_grad=True)
    (x.sum() + y.sum() * 0.0).backward()
    assert not np.any(y.grad)

    x = Tensor(np.ones(4), requires_grad=True)
    (x.sum() + x.sum()).backward()
    assert np.array_equal(x.grad, 2 * np.ones(4))


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3
    assert not y.requires_grad


def test_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with precision("double"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_grad_check_sum_of_squares(double, rng):
    x = Tensor(rng.normal(size=(4, 3)))
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-8


def test_grad_check_constant(double):
    x = Tensor([1.0, 2.0])
    assert grad_check(lambda t: Tensor(3.0), x) == 0.0


UNARY = {
    "relu": T.relu,
    "leaky_relu": lambda t: T.leaky_relu(t, 0.1),
    "sigmoid": T.sigmoid,
    "exp": T.exp,
    "log": lambda t: T.log(T.exp(t) + 0.5),
    "power": lambda t: T.power(T.exp(t), 1.5),
    "clamp": lambda t: T.clamp(t, -0.5, 0.5),
    "softmax": lambda t: T.softmax_rows(t) * Tensor(np.arange(12.0).reshape(3, 4)),
    "transpose": lambda t: t.transpose() * Tensor(np.arange(12.0).reshape(4, 3)),
    "take": lambda t: t[1:, ::2] * t[1:, ::2],
    "mean": lambda t: t.mean(axis=0) * t.mean(axis=0),
    "matmul": lambda t: T.matmul(t, t.transpose()),
    "div": lambda t: t / (T.exp(t) + 1.0),
    "concat": lambda t: T.concat([t, t * t], axis=1) * 1.5,
    "where": lambda t: T.where(t.data > 0, t * t, t * 3.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients(name, double):
    op = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(8):
        # keep away from the kinks of relu / clamp
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 0.05] += 0.2
        x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.2
        worst = max(worst, grad_check(lambda t: (op(t) * Tensor(np.linspace(-1, 1, op(Tensor(x)).size).reshape(op(Tensor(x)).shape))).sum(), Tensor(x)))
    assert worst < 1e-4


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), hnp.arrays(np.float64, (2,), elements=st.floats(-3, 3)))
def test_broadcast_add_mul_gradients(a, b):
    with precision("double"):
        bt = Tensor(b)
        assert grad_check(lambda t: ((t + bt) * (t * bt)).sum(), Tensor(a)) < 1e-4
        at = Tensor(a)
        assert grad_check(lambda t: ((at - t) * (at + t)).sum(), Tensor(b)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    with precision("double"):
        s = T.softmax_rows(Tensor(x)).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


def test_grad_shapes_match_values(rng):
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    T.sigmoid(x @ w).mean().backward()
    assert x.grad.shape == x.shape and w.grad.shape == w.shape
