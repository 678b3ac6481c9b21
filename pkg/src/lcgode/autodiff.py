"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` handles in
execution order, so node ids are topologically sorted by construction.
:func:`backward` walks the tape in reverse and returns gradients keyed by
parameter name.

    tape = Tape()
    x = tape.param("x", np.array([1.0, -2.0]))
    loss = square(x).sum()
    grads = backward(tape, loss)   # {"x": array([ 2., -4.])}
"""
from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np

__all__ = [
    "ShapeError",
    "GradCheckError",
    "Tape",
    "Var",
    "Gradients",
    "backward",
    "grad_check",
    "value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "concat",
    "stack",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "power",
    "sum",
    "mean",
    "amax",
    "softmax",
    "broadcast_to",
    "reshape",
    "transpose",
    "getitem",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class GradCheckError(FloatingPointError):
    """Non-finite value encountered while finite-differencing."""


class _Node:
    __slots__ = ("op", "inputs", "value", "fwd", "vjp", "name")

    def __init__(self, op, inputs, value, fwd, vjp, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.fwd = fwd
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, inputs, value, fwd=None, vjp=None, name=None) -> Var:
        self.nodes.append(_Node(op, inputs, value, fwd, vjp, name))
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already bound on this tape")
        var = self._push("param", (), np.array(value, dtype=np.float64), name=name)
        self.params[name] = var.id
        return var

    def const(self, value) -> Var:
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    def bind(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in arrays.items()}

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns the fresh values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.fwd is None:
                values.append(node.value)
            else:
                values.append(node.fwd(*(values[i] for i in node.inputs)))
        return values


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, id: int) -> None:
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Var:
        return transpose(self)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Gradients(dict):
    """Parameter name -> gradient array (same shape as the parameter)."""


# ---------------------------------------------------------------------------
# plumbing


def _tape_of(args: Sequence[Any]) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _raw(a) -> np.ndarray:
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)


def _lift(tape: Tape, a) -> Var:
    if isinstance(a, Var):
        if a.tape is not tape:
            raise ValueError("operands live on different tapes")
        return a
    return tape.const(a)


def _apply(op: str, fwd: Callable, vjp: Callable, *args) -> Var:
    tape = _tape_of(args)
    if tape is None:
        return fwd(*(_raw(a) for a in args))
    vs = [_lift(tape, a) for a in args]
    out = fwd(*(v.value for v in vs))
    return tape._push(op, tuple(v.id for v in vs), out, fwd, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, *vals: np.ndarray) -> None:
    try:
        np.broadcast_shapes(*(v.shape for v in vals))
    except ValueError:
        shapes = " and ".join(str(v.shape) for v in vals)
        raise ShapeError(f"{op}: incompatible shapes {shapes}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def _binary(op, f, vjp):
    def apply(a, b):
        tape = _tape_of((a, b))
        if tape is None:
            x, y = _raw(a), _raw(b)
            _check_broadcast(op, x, y)
            return f(x, y)
        va, vb = _lift(tape, a), _lift(tape, b)
        _check_broadcast(op, va.value, vb.value)
        return tape._push(op, (va.id, vb.id), f(va.value, vb.value), f, vjp)

    apply.__name__ = op
    return apply


add = _binary(
    "add",
    np.add,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)
sub = _binary(
    "sub",
    np.subtract,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
)
mul = _binary(
    "mul",
    np.multiply,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)
div = _binary(
    "div",
    np.divide,
    lambda g, out, a, b: (
        _unbroadcast(g / b, a.shape),
        _unbroadcast(-g * a / (b * b), b.shape),
    ),
)


def neg(x):
    return _apply("neg", np.negative, lambda g, out, a: (-g,), x)


# ---------------------------------------------------------------------------
# linear algebra and structure


def _matmul_vjp(g, out, a, b):
    a2 = a if a.ndim == 2 else a.reshape(1, -1)
    b2 = b if b.ndim == 2 else b.reshape(-1, 1)
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def matmul(a, b):
    tape = _tape_of((a, b))
    x, y = _raw(a), _raw(b)
    if x.ndim not in (1, 2) or y.ndim not in (1, 2) or x.shape[-1] != y.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {x.shape} and {y.shape}")
    if tape is None:
        return x @ y
    va, vb = _lift(tape, a), _lift(tape, b)
    return tape._push("matmul", (va.id, vb.id), x @ y, np.matmul, _matmul_vjp)


def concat(xs: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(xs)
    vals = [_raw(x) for x in xs]
    ax = axis % vals[0].ndim
    ref = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        if v.ndim != len(ref) or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            shapes = ", ".join(str(u.shape) for u in vals)
            raise ShapeError(f"concat(axis={axis}): mismatched shapes {shapes}")
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def fwd(*arrs):
        return np.concatenate(arrs, axis=ax)

    def vjp(g, out, *arrs):
        return tuple(np.split(g, cuts, axis=ax))

    if tape is None:
        return fwd(*vals)
    ids = tuple(_lift(tape, x).id for x in xs)
    return tape._push("concat", ids, fwd(*vals), fwd, vjp)


def stack(xs: Sequence, axis: int = 0) -> Var:
    tape = _tape_of(xs)
    vals = [_raw(x) for x in xs]
    if len({v.shape for v in vals}) != 1:
        shapes = ", ".join(str(u.shape) for u in vals)
        raise ShapeError(f"stack: mismatched shapes {shapes}")

    def fwd(*arrs):
        return np.stack(arrs, axis=axis)

    def vjp(g, out, *arrs):
        return tuple(np.moveaxis(g, axis, 0))

    if tape is None:
        return fwd(*vals)
    ids = tuple(_lift(tape, x).id for x in xs)
    return tape._push("stack", ids, fwd(*vals), fwd, vjp)


def broadcast_to(x, shape: tuple[int, ...]) -> Var:
    shape = tuple(shape)
    try:
        np.broadcast_shapes(_raw(x).shape, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {_raw(x).shape} to {shape}") from None
    return _apply(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        lambda g, out, a: (_unbroadcast(g, a.shape),),
        x,
    )


def reshape(x, shape: tuple[int, ...]) -> Var:
    shape = tuple(shape)
    size = _raw(x).size
    if -1 not in shape and int(np.prod(shape)) != size:
        raise ShapeError(f"reshape: cannot reshape {_raw(x).shape} to {shape}")
    return _apply(
        "reshape",
        lambda a: np.reshape(a, shape),
        lambda g, out, a: (np.reshape(g, a.shape),),
        x,
    )


def transpose(x, axes=None) -> Var:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda a: np.transpose(a, axes),
        lambda g, out, a: (np.transpose(g, inv),),
        x,
    )


def getitem(x, index) -> Var:
    def vjp(g, out, a):
        full = np.zeros_like(a)
        np.add.at(full, index, g)
        return (full,)

    return _apply("getitem", lambda a: a[index], vjp, x)


# ---------------------------------------------------------------------------
# elementwise unary


def _sigmoid(a):
    # tanh form avoids overflow in exp for large |a|
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x):
    return _apply("sigmoid", _sigmoid, lambda g, out, a: (g * out * (1.0 - out),), x)


def tanh(x):
    return _apply("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),), x)


def relu(x):
    # subgradient at 0 is 0
    return _apply(
        "relu",
        lambda a: np.maximum(a, 0.0),
        lambda g, out, a: (g * (a > 0.0),),
        x,
    )


def softplus(x):
    return _apply(
        "softplus",
        lambda a: np.logaddexp(0.0, a),
        lambda g, out, a: (g * _sigmoid(a),),
        x,
    )


def exp(x):
    return _apply("exp", np.exp, lambda g, out, a: (g * out,), x)


def log(x):
    return _apply("log", np.log, lambda g, out, a: (g / a,), x)


def square(x):
    return _apply("square", np.square, lambda g, out, a: (2.0 * g * a,), x)


def power(x, p: float):
    return _apply(
        "power",
        lambda a: np.power(a, p),
        lambda g, out, a: (g * p * np.power(a, p - 1.0),),
        x,
    )


# ---------------------------------------------------------------------------
# reductions


def _expand(g, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def sum(x, axis=None, keepdims=False):
    return _apply(
        "sum",
        lambda a: np.sum(a, axis=axis, keepdims=keepdims),
        lambda g, out, a: (_expand(g, a, axis, keepdims).copy(),),
        x,
    )


def mean(x, axis=None, keepdims=False):
    def vjp(g, out, a):
        count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        return (_expand(g, a, axis, keepdims) / count,)

    return _apply("mean", lambda a: np.mean(a, axis=axis, keepdims=keepdims), vjp, x)


def amax(x, axis=None, keepdims=False):
    """Max reduction; ties share the incoming gradient equally."""

    def vjp(g, out, a):
        peak = np.max(a, axis=axis, keepdims=True)
        mask = (a == peak).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (_expand(g, a, axis, keepdims) * mask,)

    return _apply("amax", lambda a: np.max(a, axis=axis, keepdims=keepdims), vjp, x)


def softmax(x, axis=-1):
    def fwd(a):
        e = np.exp(a - np.max(a, axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, a):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _apply("softmax", fwd, vjp, x)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Var) -> Gradients:
    """Gradient of the scalar ``loss`` with respect to every bound parameter."""
    if loss.tape is not tape:
        raise ValueError("loss node belongs to a different tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    nodes = tape.nodes
    for i in range(loss.id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        vals = [nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, node.vjp(g, node.value, *vals)):
            if gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = Gradients()
    for name, pid in tape.params.items():
        g = grads[pid] if pid <= loss.id else None
        out[name] = np.zeros_like(nodes[pid].value) if g is None else np.asarray(g, dtype=np.float64).reshape(nodes[pid].value.shape)
    return out


def value(x) -> np.ndarray:
    """Underlying array of a Var, or the array itself."""
    return _raw(x)


def grad_check(
    fn: Callable[[Tape, dict[str, Var]], Var],
    point: Mapping[str, np.ndarray] | Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn(tape, vars)`` must build a scalar on ``tape`` from the bound
    parameters ``vars``.  The error per coordinate is
    ``|analytic - fd| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    if not isinstance(point, Mapping):
        point = {f"x{i}": p for i, p in enumerate(point)}
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def evaluate(arrays):
        tape = Tape()
        out = fn(tape, tape.bind(arrays))
        return tape, out

    tape, out = evaluate(base)
    analytic = backward(tape, out)
    worst = 0.0
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = dict(base)
                shifted[name] = arr.copy()
                shifted[name][idx] += sign * eps
                v = float(np.ravel(evaluate(shifted)[1].value)[0])
                if not np.isfinite(v):
                    raise GradCheckError(f"non-finite value at {name}{list(idx)}")
                values.append(v)
            fd = (values[0] - values[1]) / (2.0 * eps)
            a = float(analytic[name][idx])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
