import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ffnsplit.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    grad_check,
    grouped_matmul,
    linear_forward,
    log_softmax,
    matmul,
    no_grad,
    parameter,
    pick,
    precision,
    scatter_add_rows,
    sigmoid,
    silu,
    softmax,
    tensor,
    where_mask,
)


def naive_linear(x, W, b):
    out = np.zeros(W.shape[1])
    for j in range(W.shape[1]):
        acc = 0.0
        for i in range(W.shape[0]):
            acc += x[i] * W[i, j]
        out[j] = acc + b[j]
    return out


def test_linear_identity_cases():
    eye = tensor(np.eye(2))
    assert linear_forward(tensor([1.0, 0.0]), eye, tensor([0.0, 0.0])).data.tolist() == [1.0, 0.0]
    assert linear_forward(tensor([1.0, 2.0]), eye, tensor([1.0, 1.0])).data.tolist() == [2.0, 3.0]


def test_linear_matches_triple_loop(rng):
    for _ in range(100):
        d_in, d_out = rng.integers(1, 9, size=2)
        x, W, b = rng.standard_normal(d_in), rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out)
        got = linear_forward(Tensor(x), Tensor(W), Tensor(b)).data
        ref = naive_linear(x, W, b)
        assert np.abs(got - ref).max() <= 1e-6 * max(1.0, np.abs(ref).max())


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3,\).*\(4, 2\)"):
        linear_forward(tensor(np.ones(3)), tensor(np.ones((4, 2))), tensor(np.zeros(2)))


def test_silu_values():
    with precision(np.float64):
        out = silu(tensor([0.0, 1.0, -20.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-6)
    assert out[1] == pytest.approx(0.731059, abs=1e-6)
    assert out[2] == pytest.approx(-20 / (1 + math.exp(20)), rel=1e-12)
    assert out[2] == pytest.approx(-4.12e-8, rel=1e-3)
    # the float32 path keeps the tiny negative tail too
    assert silu(tensor([-20.0])).data[0] == pytest.approx(-4.1223e-8, rel=1e-4)


def test_sigmoid_extremes_are_finite():
    for dt in (np.float32, np.float64):
        s = sigmoid(Tensor(np.array([-1000.0, 1000.0, 0.0], dtype=dt))).data
        assert np.all(np.isfinite(s))
        assert s.tolist() == [0.0, 1.0, 0.5]


def test_softmax_examples():
    assert softmax(tensor([3.0, 3.0, 3.0, 3.0])).data == pytest.approx([0.25] * 4)
    with precision(np.float64):
        assert softmax(tensor([0.0, math.log(3)])).data == pytest.approx([0.25, 0.75], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(v, c):
    p = softmax(Tensor(v)).data
    assert abs(p.sum() - 1) <= 1e-6
    assert np.all(p >= 0)
    shifted = softmax(Tensor(v + c)).data
    np.testing.assert_allclose(shifted, p, rtol=1e-9, atol=1e-12)


def test_softmax_shift_is_bitwise_for_integer_shift():
    v = np.array([0.5, -1.25, 2.0, 0.0])
    assert np.array_equal(softmax(Tensor(v)).data, softmax(Tensor(v + 8.0)).data)


def test_grad_check_constant_and_quadratic(f64):
    x = parameter([1.0, 2.0])
    assert grad_check(lambda: (x * 0.0).sum() + 3.0, [x]) < 1e-8
    loss = (x * x).sum()
    loss.backward()
    assert x.grad.tolist() == [2.0, 4.0]
    x.grad = None
    assert grad_check(lambda: (x * x).sum(), [x]) <= 1e-8


def test_grad_check_rejects_non_scalar(f64):
    x = parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        grad_check(lambda: x * 2.0, [x])


def test_fan_out_accumulates_every_contribution(f64):
    x = parameter([1.5])
    k = 5
    total = x * 1.0
    for i in range(1, k):
        total = total + x * float(i + 1)
    total.sum().backward()
    assert x.grad[0] == pytest.approx(sum(range(1, k + 1)))


def test_backward_visits_each_node_once(f64):
    calls = []
    x = parameter([2.0])
    y = x * x
    orig = y._backward

    def spy(g):
        calls.append(1)
        return orig(g)

    y._backward = spy
    (y + y + y).sum().backward()
    assert len(calls) == 1
    assert x.grad[0] == pytest.approx(12.0)


def _rand(rng, *shape):
    return parameter(rng.standard_normal(shape))


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "pow", "matmul", "batched_matmul", "sum_axis",
                                  "mean", "reshape_transpose", "exp_log", "silu", "sigmoid", "softmax",
                                  "log_softmax", "pick", "getitem", "scatter", "grouped", "where", "clamp"])
def test_operation_gradients_match_finite_differences(name, rng, f64):
    a, b = _rand(rng, 3, 4), _rand(rng, 4)
    c = _rand(rng, 4, 5)
    w = parameter(np.abs(rng.standard_normal((3, 4))) + 0.5)
    probe = rng.standard_normal(64)

    def weighted(t):
        return (t * Tensor(probe[: t.data.size].reshape(t.shape))).sum()

    cases = {
        "add": (lambda: weighted(a + b), [a, b]),
        "sub": (lambda: weighted(a - b), [a, b]),
        "mul": (lambda: weighted(a * b), [a, b]),
        "div": (lambda: weighted(a / w), [a, w]),
        "pow": (lambda: weighted(w ** 1.5), [w]),
        "matmul": (lambda: weighted(a @ c), [a, c]),
        "batched_matmul": (lambda: weighted(a.reshape(1, 3, 4) @ c.reshape(1, 4, 5)), [a, c]),
        "sum_axis": (lambda: weighted(a.sum(axis=0)), [a]),
        "mean": (lambda: weighted(a.mean(axis=-1, keepdims=True)), [a]),
        "reshape_transpose": (lambda: weighted(a.reshape(2, 6).transpose(1, 0)), [a]),
        "exp_log": (lambda: weighted(w.log() + a.exp()), [a, w]),
        "silu": (lambda: weighted(silu(a)), [a]),
        "sigmoid": (lambda: weighted(sigmoid(a)), [a]),
        "softmax": (lambda: weighted(softmax(a)), [a]),
        "log_softmax": (lambda: weighted(log_softmax(a)), [a]),
        "pick": (lambda: weighted(pick(a, np.array([0, 3, 1]))), [a]),
        "getitem": (lambda: weighted(a[np.array([0, 2, 0])]), [a]),
        "scatter": (lambda: weighted(scatter_add_rows(a, np.array([1, 1, 0]), 2)), [a]),
        "grouped": (lambda: weighted(grouped_matmul(a.reshape(3, 2, 2), c.reshape(2, 2, 5))), [a, c]),
        "where": (lambda: weighted(where_mask(np.eye(3, 4, dtype=bool), a, -7.0)), [a]),
        "clamp": (lambda: weighted(w.clamp_min(0.9)), [w]),
    }
    fn, params = cases[name]
    assert grad_check(fn, params, eps=1e-5) <= 1e-4


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_matmul_rejects_mismatch():
    with pytest.raises(DimensionError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_default_precision_is_float32():
    assert tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert tensor([1.0]).dtype == np.float64
