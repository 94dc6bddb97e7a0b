import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtil import numerics as nx
from mtil.numerics import Tape, constant, grad_check


def grad_of(f, x):
    tape = Tape()
    v = tape.variable(x)
    g = tape.backward(f(v))
    return g.get(v.node, np.zeros_like(np.asarray(x, float)))


def central_diff(f, x, eps=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[i] += eps
        m[i] -= eps
        out[i] = (f(constant(p)).value.item() - f(constant(m)).value.item()) / (2 * eps)
    return out


def test_softplus_zero():
    assert nx.softplus(constant([0.0])).value[0] == pytest.approx(math.log(2), abs=1e-15)


def test_matmul_identity():
    M = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(nx.matmul(constant(np.eye(3)), constant(M)).value, M)


def test_silu_zero():
    assert nx.silu(constant([0.0])).value[0] == 0.0


def test_square_grad():
    assert grad_of(lambda x: nx.sum(nx.square(x)), [3.0])[0] == 6.0


def test_softplus_grad_at_zero():
    np.testing.assert_allclose(grad_of(lambda w: nx.sum(nx.softplus(w)), np.zeros(4)), 0.5, rtol=0, atol=0)


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(nx.ShapeError):
        tape.backward(x * 2.0)


def test_backward_requires_loss_on_tape():
    tape = Tape()
    with pytest.raises(ValueError):
        tape.backward(constant([1.0]))
    with pytest.raises(ValueError):
        Tape().backward(tape.variable([1.0]))


def test_shape_mismatch_raises():
    with pytest.raises(nx.ShapeError):
        constant(np.ones((2, 3))) + constant(np.ones(2))
    with pytest.raises(nx.ShapeError):
        constant(np.ones((2, 3))) @ constant(np.ones((2, 3)))


def test_non_finite_raises():
    with pytest.raises(nx.NonFiniteError):
        nx.exp(constant([1000.0]))
    with pytest.raises(nx.NonFiniteError):
        nx.log(constant([0.0]))
    with pytest.raises(nx.NonFiniteError):
        constant([np.nan])


def test_three_layer_chain_matches_finite_differences():
    rng = np.random.default_rng(1)
    W1, W2, W3 = rng.normal(size=(4, 5)), rng.normal(size=(5, 5)), rng.normal(size=(5, 1))

    def f(x):
        h = nx.tanh(x @ W1)
        h = nx.silu(h @ W2)
        return nx.sum(nx.softplus(h @ W3))

    x = rng.normal(size=(3, 4))
    g = grad_of(f, x)
    cd = central_diff(f, x)
    rel = np.abs(g - cd) / (np.abs(g) + np.abs(cd) + 1e-12)
    assert rel.max() <= 1e-6


def test_grad_check_quadratic():
    assert grad_check(lambda t: nx.sum(nx.square(t)), [1.0, 2.0], 1e-5) <= 1e-8


def test_grad_check_constant_function():
    assert grad_check(lambda t: constant([3.0]), [1.0, 2.0], 1e-5) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t: nx.sum(t), [1.0], 0.0)


def test_fan_out_accumulates():
    x0 = np.array([0.3, -1.2, 2.0])
    both = grad_of(lambda x: nx.sum(nx.tanh(x)) + nx.sum(nx.square(x)), x0)
    a = grad_of(lambda x: nx.sum(nx.tanh(x)), x0)
    b = grad_of(lambda x: nx.sum(nx.square(x)), x0)
    np.testing.assert_allclose(both, a + b, rtol=0, atol=1e-15)


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_backward_is_linear(a, b):
    x0 = np.array([0.5, -0.7, 1.1])

    def f(x):
        return nx.sum(nx.exp(x))

    def g(x):
        return nx.sum(nx.silu(x))

    combo = grad_of(lambda x: nx.scale(f(x), a) + nx.scale(g(x), b), x0)
    np.testing.assert_allclose(combo, a * grad_of(f, x0) + b * grad_of(g, x0), rtol=1e-12, atol=1e-12)


# Scalar references for each elementwise op, evaluated with the math module.
SCALAR_REFS = {
    "exp": (nx.exp, math.exp),
    "softplus": (nx.softplus, lambda v: math.log1p(math.exp(v)) if v < 30 else v + math.log1p(math.exp(-v))),
    "sigmoid": (nx.sigmoid, lambda v: 1 / (1 + math.exp(-v))),
    "silu": (nx.silu, lambda v: v / (1 + math.exp(-v))),
    "tanh": (nx.tanh, math.tanh),
    "relu": (nx.relu, lambda v: max(v, 0.0)),
    "square": (nx.square, lambda v: v * v),
}


@pytest.mark.parametrize("name", sorted(SCALAR_REFS))
def test_elementwise_matches_scalar_reference(name):
    op, ref = SCALAR_REFS[name]
    x = np.random.default_rng(2).normal(scale=3.0, size=200)
    got = op(constant(x)).value
    want = np.array([ref(v) for v in x])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_log_matches_scalar_reference():
    x = np.random.default_rng(3).uniform(0.01, 10, 100)
    np.testing.assert_allclose(nx.log(constant(x)).value, [math.log(v) for v in x], rtol=1e-12, atol=0)


def test_matmul_matches_scalar_loop():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    want = [[sum(a[i, k] * b[k, j] for k in range(6)) for j in range(3)] for i in range(4)]
    np.testing.assert_allclose(nx.matmul(constant(a), constant(b)).value, want, rtol=1e-12, atol=1e-12)


def test_reductions_and_softmax_match_scalar_loops():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 5))
    assert nx.sum(constant(x)).value[0] == pytest.approx(math.fsum(x.ravel()), abs=1e-12)
    assert nx.mean(constant(x)).value[0] == pytest.approx(math.fsum(x.ravel()) / 15, abs=1e-12)
    for i in range(3):
        row = x[i]
        den = math.fsum(math.exp(v) for v in row)
        np.testing.assert_allclose(nx.softmax(constant(x)).value[i], [math.exp(v) / den for v in row], atol=1e-12)
        np.testing.assert_allclose(nx.log_softmax(constant(x)).value[i], [v - math.log(den) for v in row], atol=1e-12)
        assert nx.logsumexp(constant(x)).value[i] == pytest.approx(math.log(den), abs=1e-12)
        ms = math.fsum(v * v for v in row) / 5
        np.testing.assert_allclose(nx.rmsnorm(constant(x)).value[i], row / math.sqrt(ms + 1e-6), atol=1e-12)


def test_slice_concat_reshape_values():
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(constant(x)[1:3].value, x[1:3])
    np.testing.assert_array_equal(nx.concat([constant(x), constant(x)], axis=0).value, np.vstack([x, x]))
    np.testing.assert_array_equal(nx.reshape(constant(x), (4, 3)).value, x.reshape(4, 3))


GRAD_CASES = {
    "matmul_mm": lambda x: nx.sum(nx.square(x @ np.arange(12.0).reshape(3, 4) / 10)),
    "matmul_vm": lambda x: nx.sum(nx.square(x[0] @ np.arange(12.0).reshape(3, 4) / 10)),
    "matmul_mv": lambda x: nx.sum(nx.square(x @ np.array([0.3, -0.2, 0.1]))),
    "row_broadcast_add": lambda x: nx.sum(nx.square(x + x[0])),
    "row_broadcast_mul": lambda x: nx.sum(nx.square(x * x[1])),
    "softmax": lambda x: nx.sum(nx.square(nx.softmax(x)) * np.arange(6.0).reshape(2, 3)),
    "log_softmax": lambda x: nx.sum(nx.log_softmax(x) * np.arange(6.0).reshape(2, 3)),
    "logsumexp": lambda x: nx.sum(nx.square(nx.logsumexp(x))),
    "rmsnorm": lambda x: nx.sum(nx.rmsnorm(x) * np.arange(6.0).reshape(2, 3)),
    "clip": lambda x: nx.sum(nx.square(nx.clip(x, -0.5, 0.5))),
    "concat_slice": lambda x: nx.sum(nx.square(nx.concat([x[:, :2], nx.tanh(x)], axis=1))),
    "sum_axis": lambda x: nx.sum(nx.square(nx.sum(x, axis=0))),
    "mean_axis": lambda x: nx.sum(nx.square(nx.mean(x, axis=-1))),
    "reshape": lambda x: nx.sum(nx.reshape(x, (3, 2)) @ np.array([[1.0], [-2.0]])),
    "log": lambda x: nx.sum(nx.log(nx.square(x) + 1.0)),
    "sub_neg": lambda x: nx.sum(nx.square(1.0 - x - x[0])),
    "sigmoid": lambda x: nx.sum(nx.sigmoid(x) * x),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(name):
    x = np.array([[0.3, -0.8, 1.3], [0.1, 0.9, -0.2]])
    assert grad_check(GRAD_CASES[name], x, 1e-6) <= 1e-6


def test_constants_do_not_touch_tapes():
    y = nx.tanh(constant([1.0])) + 2.0
    assert not y.on_tape


def test_mixing_tapes_is_rejected():
    a, b = Tape().variable([1.0]), Tape().variable([2.0])
    with pytest.raises(ValueError):
        a + b
