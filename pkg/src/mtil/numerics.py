"""Dense float64 arrays with define-by-run reverse-mode differentiation.

A :class:`Tape` records every op applied to arrays that live on it, together
with a closure computing the vector-Jacobian product. Arrays built without a
tape (``constant``) take the fast path: ops on constants only compute values.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a ``(M, N)`` matrix with an ``(N,)`` row vector, or a Python scalar.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "silu",
    "tanh",
    "relu",
    "square",
    "sum",
    "mean",
    "reshape",
    "concat",
    "softmax",
    "log_softmax",
    "logsumexp",
    "rmsnorm",
    "clip",
    "custom_op",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Append-only record of ops, replayed in reverse by :meth:`backward`."""

    def __init__(self) -> None:
        self._kinds: list[str] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[VJP | None] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._kinds)

    def _append(self, kind: str, value: np.ndarray, parents, vjp) -> "DiffArray":
        node = len(self._kinds)
        self._kinds.append(kind)
        self._parents.append(tuple(parents))
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        return DiffArray(value, self, node)

    def variable(self, value) -> "DiffArray":
        """Register a leaf whose gradient is wanted."""
        value = _float_array(value)
        _check_finite("variable", value)
        return self._append("leaf", value, (), None)

    def kind(self, node: int) -> str:
        return self._kinds[node]

    def backward(self, loss: "DiffArray") -> dict[int, np.ndarray]:
        """Gradients of a single-element ``loss`` w.r.t. every node reached."""
        if not isinstance(loss, DiffArray) or loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._kinds)
        grads[loss.node] = np.ones(loss.shape)
        for node in range(loss.node, -1, -1):
            g = grads[node]
            vjp = self._vjps[node]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[node], vjp(g)):
                if parent is None or pg is None:
                    continue
                if pg.shape != self._shapes[parent]:
                    raise ShapeError(
                        f"vjp of {self._kinds[node]} returned {pg.shape}, "
                        f"expected {self._shapes[parent]}"
                    )
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
        return {i: g for i, g in enumerate(grads) if g is not None}


class DiffArray:
    """A float64 array, optionally a node on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: Tape | None = None, node: int | None = None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def on_tape(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        where = f"node={self.node}" if self.on_tape else "const"
        return f"DiffArray(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("DiffArray only divides by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _slice(self, index)


def _float_array(value) -> np.ndarray:
    # extended precision passes through so finite differences can use it
    value = np.array(value)
    return value.astype(np.longdouble if value.dtype == np.longdouble else np.float64)


def constant(value) -> DiffArray:
    value = _float_array(value)
    _check_finite("constant", value)
    return DiffArray(value)


def _as_diff(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return constant(x)


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite output from {kind}")


def custom_op(kind: str, inputs: Sequence[DiffArray], value: np.ndarray, vjp: VJP) -> DiffArray:
    """Record ``value`` as the output of a user op with the given VJP.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    _check_finite(kind, value)
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs live on different tapes")
            tape = x.tape
    if tape is None:
        return DiffArray(value)
    return tape._append(kind, value, [x.node for x in inputs], vjp)


# ---------------------------------------------------------------- elementwise

def _binary_shape(kind: str, a: DiffArray, b: DiffArray) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_b"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, mode: str, which: str) -> np.ndarray:
    if mode == "row_" + which:
        return g.sum(axis=0)
    return g


def add(a, b) -> DiffArray:
    if np.isscalar(b):
        a = _as_diff(a)
        return custom_op("add", [a], a.value + b, lambda g: (g,))
    if np.isscalar(a):
        return add(b, a)
    a, b = _as_diff(a), _as_diff(b)
    mode = _binary_shape("add", a, b)
    return custom_op(
        "add",
        [a, b],
        a.value + b.value,
        lambda g: (_unbroadcast(g, mode, "a"), _unbroadcast(g, mode, "b")),
    )


def neg(a) -> DiffArray:
    a = _as_diff(a)
    return custom_op("neg", [a], -a.value, lambda g: (-g,))


def sub(a, b) -> DiffArray:
    if np.isscalar(b):
        return add(a, -b)
    return add(a, neg(b))


def scale(a, c: float) -> DiffArray:
    a = _as_diff(a)
    c = float(c)
    return custom_op("scale", [a], a.value * c, lambda g: (g * c,))


def mul(a, b) -> DiffArray:
    if np.isscalar(b):
        return scale(a, b)
    if np.isscalar(a):
        return scale(b, a)
    a, b = _as_diff(a), _as_diff(b)
    mode = _binary_shape("mul", a, b)
    av, bv = a.value, b.value
    return custom_op(
        "mul",
        [a, b],
        av * bv,
        lambda g: (_unbroadcast(g * bv, mode, "a"), _unbroadcast(g * av, mode, "b")),
    )


def _unary(kind: str, a, value: np.ndarray, dvalue: Callable[[], np.ndarray]) -> DiffArray:
    a = _as_diff(a)
    if a.tape is None:
        _check_finite(kind, value)
        return DiffArray(value)
    return custom_op(kind, [a], value, lambda g: (g * dvalue(),))


def exp(a) -> DiffArray:
    a = _as_diff(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _unary("exp", a, y, lambda: y)


def log(a) -> DiffArray:
    a = _as_diff(a)
    if (a.value <= 0).any():
        raise NonFiniteError("log of non-positive value")
    x = a.value
    return _unary("log", a, np.log(x), lambda: 1.0 / x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> DiffArray:
    a = _as_diff(a)
    x = a.value
    y = np.logaddexp(0.0, x)
    return _unary("softplus", a, y, lambda: _sigmoid(x))


def sigmoid(a) -> DiffArray:
    a = _as_diff(a)
    s = _sigmoid(a.value)
    return _unary("sigmoid", a, s, lambda: s * (1.0 - s))


def silu(a) -> DiffArray:
    a = _as_diff(a)
    x = a.value
    s = _sigmoid(x)
    return _unary("silu", a, x * s, lambda: s * (1.0 + x * (1.0 - s)))


def tanh(a) -> DiffArray:
    a = _as_diff(a)
    y = np.tanh(a.value)
    return _unary("tanh", a, y, lambda: 1.0 - y * y)


def relu(a) -> DiffArray:
    a = _as_diff(a)
    x = a.value
    return _unary("relu", a, np.maximum(x, 0.0), lambda: (x > 0).astype(np.float64))


def square(a) -> DiffArray:
    a = _as_diff(a)
    x = a.value
    return _unary("square", a, x * x, lambda: 2.0 * x)


def clip(a, lo: float, hi: float) -> DiffArray:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = _as_diff(a)
    x = a.value
    return _unary("clip", a, np.clip(x, lo, hi), lambda: ((x >= lo) & (x <= hi)).astype(np.float64))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> DiffArray:
    """``a @ b`` for 1-D or 2-D operands (vector-matrix, matrix-matrix, ...)."""
    a, b = _as_diff(a), _as_diff(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g * bv, g * av

    return custom_op("matmul", [a, b], _float_array(av @ bv), vjp)


def reshape(a, shape: tuple[int, ...]) -> DiffArray:
    a = _as_diff(a)
    old = a.shape
    try:
        y = a.value.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return custom_op("reshape", [a], y, lambda g: (g.reshape(old),))


def _slice(a: DiffArray, index) -> DiffArray:
    y = a.value[index]
    if not isinstance(y, np.ndarray):
        y = np.array([y])
    y = _float_array(y)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g.reshape(out[index].shape))
        return (out,)

    return custom_op("slice", [a], y, vjp)


def concat(arrays: Sequence, axis: int = -1) -> DiffArray:
    arrays = [_as_diff(x) for x in arrays]
    try:
        y = np.concatenate([x.value for x in arrays], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return custom_op("concat", arrays, y, lambda g: tuple(np.split(g, bounds, axis=axis)))


# --------------------------------------------------------------- reductions

def sum(a, axis: int | None = None) -> DiffArray:  # noqa: A001
    """Sum over all entries (result shape ``(1,)``) or one axis."""
    a = _as_diff(a)
    shape = a.shape
    if axis is None:
        return custom_op("sum", [a], np.array([a.value.sum()]), lambda g: (np.full(shape, g[0]),))
    y = a.value.sum(axis=axis)
    return custom_op("sum", [a], y, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis: int | None = None) -> DiffArray:
    a = _as_diff(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax(a) -> DiffArray:
    """Softmax over the last axis."""
    a = _as_diff(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op("softmax", [a], p, vjp)


def log_softmax(a) -> DiffArray:
    a = _as_diff(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return custom_op("log_softmax", [a], y, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def logsumexp(a) -> DiffArray:
    """log(sum(exp(a))) over the last axis."""
    a = _as_diff(a)
    m = a.value.max(axis=-1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=-1, keepdims=True)
    y = (m + np.log(s))[..., 0]
    p = e / s
    return custom_op("logsumexp", [a], y, lambda g: (p * g[..., None],))


def rmsnorm(a, eps: float = 1e-6) -> DiffArray:
    """x / sqrt(mean(x**2, last axis) + eps), without a gain."""
    a = _as_diff(a)
    x = a.value
    d = x.shape[-1]
    with np.errstate(over="ignore"):
        ms = (x * x).mean(axis=-1, keepdims=True)
    if not np.isfinite(ms).all():
        raise NonFiniteError("rmsnorm: mean square overflowed")
    r = 1.0 / np.sqrt(ms + eps)
    y = x * r

    def vjp(g):
        return (r * g - y * (r * r / d) * (g * x).sum(axis=-1, keepdims=True),)

    return custom_op("rmsnorm", [a], y, vjp)


# ----------------------------------------------------------------- gradients

def backward(loss: DiffArray) -> dict[int, np.ndarray]:
    if loss.tape is None:
        raise ValueError("loss is not on a tape")
    return loss.tape.backward(loss)


def grad_check(f: Callable[[DiffArray], DiffArray], theta, eps: float = 1e-5, indices=None) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` maps a parameter array to a single-element loss. The relative error
    per component is ``|g - cd| / (|g| + |cd| + 1e-12)``. ``indices`` restricts
    the finite differences to those flat positions; the default checks all.
    Perturbed losses are evaluated in ``np.longdouble`` so that rounding in
    the loss does not swamp near-zero gradient entries (on platforms where
    it is wider than float64).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    tape = Tape()
    x = tape.variable(theta)
    loss = f(x)
    if loss.tape is tape:
        analytic = tape.backward(loss).get(x.node, np.zeros_like(theta))
    else:
        analytic = np.zeros_like(theta)
    flat = theta.ravel().astype(np.longdouble)
    worst = 0.0
    for i in range(flat.size) if indices is None else np.asarray(indices, dtype=np.int64):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = f(constant(plus.reshape(theta.shape))).value.item()
        fm = f(constant(minus.reshape(theta.shape))).value.item()
        cd = float((fp - fm) / (2 * np.longdouble(eps)))
        g = float(analytic.ravel()[i])
        err = abs(g - cd) / (abs(g) + abs(cd) + 1e-12)
        if not np.isfinite(err):
            raise NonFiniteError("non-finite value during gradient check")
        worst = max(worst, err)
    return worst
