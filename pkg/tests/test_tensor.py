import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixerflow import tensor as T
from mixerflow.errors import DimensionError, DomainError, GraphError, NumericError
from mixerflow.nn import Dense
from mixerflow.tensor import Parameter, Tensor

from oracles import matmul_loops, normal_cdf, sum_axis0_loops


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [3.0, 4.25]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_arithmetic():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, matmul_loops(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_gelu_zero_and_two():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    expected = 2.0 * normal_cdf(2.0)
    assert abs(expected - 1.9545) < 1e-4
    assert abs(T.gelu(Tensor([2.0])).data[0] - expected) < 1e-12


def test_gelu_tanh_form_is_close():
    x = np.linspace(-5, 5, 101)
    exact = T.gelu(Tensor(x)).data
    approx = T.gelu(Tensor(x), approximate=True).data
    assert np.max(np.abs(exact - approx)) < 1e-3


@given(arrays(np.float64, 7, elements=st.floats(1e-3, 1e3)))
def test_exp_log_inverse(v):
    np.testing.assert_allclose(T.exp(T.log(Tensor(v))).data, v, rtol=1e-12)


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_overflow_is_numeric_error():
    with pytest.raises(NumericError):
        T.exp(Tensor([1000.0]))


def test_reductions():
    assert T.reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]])).data == 10.0
    assert T.reduce_mean(Tensor(np.full((3, 5), 2.5))).data == 2.5
    a = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_allclose(T.reduce_sum(Tensor(a), axis=0).data, sum_axis0_loops(a), atol=1e-14)
    with pytest.raises(DimensionError):
        T.reduce_sum(Tensor(a), axis=2)


def test_grad_of_sum_is_ones():
    w = Parameter(np.arange(6.0).reshape(2, 3))
    T.backward(w.sum(), [w])
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_grad_of_square():
    w = Parameter([1.0, 2.0, 3.0])
    T.backward((w * w).sum(), [w])
    assert w.grad.tolist() == [2.0, 4.0, 6.0]


def test_second_backward_raises():
    w = Parameter([1.0, 2.0])
    loss = (w * w).sum()
    T.backward(loss, [w])
    with pytest.raises(GraphError):
        T.backward(loss, [w])


def test_backward_needs_scalar():
    w = Parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        T.backward(w * w, [w])


def test_no_grad_records_nothing():
    w = Parameter([1.0])
    with T.no_grad():
        y = (w * w).sum()
    with pytest.raises(GraphError):
        T.backward(y, [w])


def test_unreached_parameter_gets_zero_grad():
    a, b = Parameter([1.0]), Parameter([5.0])
    b.grad[...] = 7.0
    T.backward((a * 3.0).sum(), [a, b])
    assert a.grad[0] == 3.0 and b.grad[0] == 0.0


def _fd_grad(f, p, step=1e-5):
    g = np.zeros_like(p.data)
    for i in range(p.size):
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * step)
    return g


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.Generator(np.random.PCG64(0))
    layers = [Dense(4, 8, rng), Dense(8, 8, rng), Dense(8, 3, rng)]
    x = rng.standard_normal((6, 4))
    labels = np.array([0, 1, 2, 0, 1, 2])

    def loss_t():
        h = Tensor(x)
        for i, d in enumerate(layers):
            h = d(h)
            if i < 2:
                h = T.gelu(h)
        return T.cross_entropy(h, labels)

    params = [p for d in layers for p in d.parameters()]
    T.backward(loss_t(), params)

    def f():
        with T.no_grad():
            return float(loss_t().data)

    for p in params:
        num = _fd_grad(f, p)
        rel = np.abs(p.grad - num) / np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), 1e-8)
        assert rel.max() < 1e-4


@pytest.mark.parametrize("op,fn,deriv", [
    ("tanh", np.tanh, lambda x: 1 - np.tanh(x) ** 2),
    ("sigmoid", lambda x: 1 / (1 + np.exp(-x)), lambda x: np.exp(-x) / (1 + np.exp(-x)) ** 2),
    ("exp", np.exp, np.exp),
])
def test_elementwise_grads(op, fn, deriv):
    x = np.linspace(-2, 2, 9)
    p = Parameter(x.copy())
    y = T.elementwise(op, p)
    np.testing.assert_allclose(y.data, fn(x), rtol=1e-12)
    T.backward(y.sum(), [p])
    np.testing.assert_allclose(p.grad, deriv(x), rtol=1e-10)


def test_gelu_grads_both_forms():
    x = np.linspace(-3, 3, 13)
    for approx in (False, True):
        p = Parameter(x.copy())
        T.backward(T.gelu(p, approximate=approx).sum(), [p])

        def f():
            with T.no_grad():
                return float(T.gelu(p, approximate=approx).sum().data)
        np.testing.assert_allclose(p.grad, _fd_grad(f, p), atol=1e-8)


def test_shape_ops_grads():
    rng = np.random.default_rng(1)
    p = Parameter(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((4, 3, 2))
    perm = np.array([2, 0, 3, 1])

    def build():
        a = T.transpose(p, (2, 1, 0))
        b = T.take(a, perm, axis=0)
        c = T.concatenate([b[:2], b[2:]], axis=0).reshape(4, 3, 2)
        return (c * Tensor(w)).sum() + T.logsumexp(p.reshape(6, 4), axis=1).sum()

    T.backward(build(), [p])

    def f():
        with T.no_grad():
            return float(build().data)
    np.testing.assert_allclose(p.grad, _fd_grad(f, p), atol=1e-8)


def test_single_precision_stays_single():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (x * 2.0 + x).dtype == np.float32
    assert T.zeros((2,), "single").dtype == np.float32


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_matmul_grad_law(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = Parameter(rng.standard_normal((n, k))), Parameter(rng.standard_normal((k, m)))
    g = rng.standard_normal((n, m))
    T.backward((T.matmul(a, b) * Tensor(g)).sum(), [a, b])
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_batch_norm_normalises_in_training():
    rng = np.random.default_rng(0)
    x = Tensor(3 + 2 * rng.standard_normal((64, 5)))
    rm, rv = np.zeros(5), np.ones(5)
    y = T.batch_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), rm, rv, True, 0.1, 1e-5)
    assert np.max(np.abs(y.data.mean(axis=0))) < 1e-10
    assert np.max(np.abs(y.data.var(axis=0) - 1)) < 1e-3
    assert np.all(rm != 0)


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor(np.zeros((10, 10))), np.arange(10))
    assert abs(float(loss.data) - math.log(10)) < 1e-12
