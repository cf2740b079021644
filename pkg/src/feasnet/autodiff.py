"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Values carry an optional leading batch axis; elementwise ops broadcast the
usual numpy way and ``backward`` reduces adjoints back to the input shape.

The module-level helpers (``sin``, ``matvec``, ``relu`` ...) accept either a
plain ``np.ndarray`` or a :class:`Var`.  Both paths evaluate the exact same
numpy expression, so code written once against these helpers produces
bit-identical forward values whether or not it is being recorded.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SOFTPLUS_BETA = 50.0
NORM_EPS = 1e-12


class TapeError(ValueError):
    pass


def as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def rowwise_matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``v @ M.T`` over the last axis of ``v``.

    einsum's plain C loop is used instead of BLAS so that every row of a
    batch gets exactly the arithmetic it would get on its own.
    """
    return np.einsum("...j,ij->...i", v, M)


def rowwise_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.broadcast_arrays(a, b)
    return np.einsum("...i,...i->...", a, b)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# op table: forward(values, attrs) -> value ; vjp(g, values, out, attrs) -> grads


def _fwd_sum(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"))


def _vjp_sum(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _fwd_norm(vals, attrs):
    return np.sqrt(rowwise_dot(vals[0], vals[0]))


def _vjp_norm(g, vals, out, attrs):
    return (np.expand_dims(g / np.maximum(out, NORM_EPS), -1) * vals[0],)


def _vjp_matvec(g, vals, out, attrs):
    M, v = vals
    gv = g @ M
    g2 = g.reshape(-1, M.shape[0])
    gM = g2.T @ np.broadcast_to(v, g.shape[:-1] + v.shape[-1:]).reshape(-1, M.shape[1])
    return gM, _unbroadcast(gv, v.shape)


def _vjp_dot(g, vals, out, attrs):
    a, b = vals
    ge = np.expand_dims(g, -1)
    return _unbroadcast(ge * b, a.shape), _unbroadcast(ge * a, b.shape)


def _fwd_softplus(vals, attrs):
    beta = attrs.get("beta", SOFTPLUS_BETA)
    return np.logaddexp(0.0, beta * vals[0]) / beta


def _vjp_softplus(g, vals, out, attrs):
    beta = attrs.get("beta", SOFTPLUS_BETA)
    return (g * _sigmoid(beta * vals[0]),)


def _fwd_silu(vals, attrs):
    x = vals[0]
    return x * _sigmoid(x)


def _vjp_silu(g, vals, out, attrs):
    x = vals[0]
    s = _sigmoid(x)
    return (g * (s * (1.0 + x * (1.0 - s))),)


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    vjp: Callable | None
    arity: int


OPS: dict[str, OpDef] = {
    "add": OpDef(lambda v, a: v[0] + v[1],
                 lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)), 2),
    "sub": OpDef(lambda v, a: v[0] - v[1],
                 lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)), 2),
    "neg": OpDef(lambda v, a: -v[0], lambda g, v, o, a: (-g,), 1),
    "scalar-mul": OpDef(lambda v, a: a["c"] * v[0], lambda g, v, o, a: (a["c"] * g,), 1),
    "elementwise-mul": OpDef(lambda v, a: v[0] * v[1],
                             lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape),
                                                 _unbroadcast(g * v[0], v[1].shape)), 2),
    "div": OpDef(lambda v, a: v[0] / v[1],
                 lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape),
                                     _unbroadcast(-g * o / v[1], v[1].shape)), 2),
    "matvec": OpDef(lambda v, a: rowwise_matvec(v[0], v[1]), _vjp_matvec, 2),
    "dot": OpDef(lambda v, a: rowwise_dot(v[0], v[1]), _vjp_dot, 2),
    "sum": OpDef(_fwd_sum, _vjp_sum, 1),
    "sin": OpDef(lambda v, a: np.sin(v[0]), lambda g, v, o, a: (g * np.cos(v[0]),), 1),
    "cos": OpDef(lambda v, a: np.cos(v[0]), lambda g, v, o, a: (-g * np.sin(v[0]),), 1),
    "exp": OpDef(lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,), 1),
    "log": OpDef(lambda v, a: np.log(v[0]), lambda g, v, o, a: (g / v[0],), 1),
    "sqrt": OpDef(lambda v, a: np.sqrt(v[0]), lambda g, v, o, a: (g / (2.0 * o),), 1),
    # subgradient 0 at the kink
    "max-with-zero": OpDef(lambda v, a: np.maximum(v[0], 0.0),
                           lambda g, v, o, a: (g * (v[0] > 0.0),), 1),
    "max-with-const": OpDef(lambda v, a: np.maximum(v[0], a["c"]),
                            lambda g, v, o, a: (g * (v[0] > a["c"]),), 1),
    "softplus": OpDef(_fwd_softplus, _vjp_softplus, 1),
    "sigmoid": OpDef(lambda v, a: _sigmoid(a["beta"] * v[0]),
                     lambda g, v, o, a: (g * a["beta"] * o * (1.0 - o),), 1),
    "l2-norm": OpDef(_fwd_norm, _vjp_norm, 1),
    "silu": OpDef(_fwd_silu, _vjp_silu, 1),
    "square": OpDef(lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],), 1),
    "reshape": OpDef(lambda v, a: v[0].reshape(a["shape"]),
                     lambda g, v, o, a: (g.reshape(v[0].shape),), 1),
    "expand": OpDef(lambda v, a: np.expand_dims(v[0], a["axis"]),
                    lambda g, v, o, a: (np.squeeze(g, a["axis"]),), 1),
    "stop": OpDef(lambda v, a: v[0], None, 1),
}


class Var:
    """Handle to one node of a :class:`Tape` (the node id plus its tape)."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, op={self.tape.ops[self.index]}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("operands belong to different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scalar-mul", [self], c=float(other))
        return self.tape.record("elementwise-mul", [self, self._lift(other)])

    def __rmul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scalar-mul", [self], c=float(other))
        return self.tape.record("elementwise-mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("div", [self._lift(other), self])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.record("reshape", [self], shape=tuple(shape))


class Tape:
    """Append-only record of evaluated operations.

    Nodes are stored in creation order, which is a topological order since
    an op can only consume nodes that already exist.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.attrs: list[dict] = []
        self.tracked: list[bool] = []
        self.leaves: list[int] = []

    def __len__(self):
        return len(self.values)

    def _push(self, op, inputs, value, attrs, tracked):
        self.values.append(value)
        self.ops.append(op)
        self.inputs.append(tuple(inputs))
        self.attrs.append(attrs)
        self.tracked.append(tracked)
        return Var(self, len(self.values) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        var = self._push("leaf", (), as_array(value), {}, requires_grad)
        if requires_grad:
            self.leaves.append(var.index)
        return var

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def record(self, op: str, inputs: Sequence[Var], **attrs) -> Var:
        if op == "leaf":
            raise TapeError("use Tape.leaf to create leaves")
        opdef = OPS.get(op)
        if opdef is None:
            raise TapeError(f"unknown op-kind {op!r}")
        if len(inputs) != opdef.arity:
            raise TapeError(f"{op} expects {opdef.arity} inputs, got {len(inputs)}")
        idx = []
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise TapeError("input does not belong to this tape")
            idx.append(v.index)
        vals = [self.values[i] for i in idx]
        try:
            value = opdef.forward(vals, attrs)
        except ValueError as exc:
            raise TapeError(f"shape mismatch in {op}: {[v.shape for v in vals]}") from exc
        value = np.asarray(value, dtype=np.float64)
        tracked = opdef.vjp is not None and any(self.tracked[i] for i in idx)
        return self._push(op, idx, value, attrs, tracked)

    def stop_gradient(self, node: Var) -> Var:
        return self.record("stop", [node])

    def backward(self, root: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
        """Reverse-accumulate d(root)/d(leaf).

        Returns one gradient per entry of ``wrt`` (default: every
        differentiable leaf, in creation order).  Leaves the root does not
        depend on get zeros.
        """
        if root.tape is not self:
            raise TapeError("root does not belong to this tape")
        if root.value.size != 1:
            raise TapeError(f"root must be scalar, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for i in range(root.index, -1, -1):
            if self.ops[i] == "leaf" or i not in adj:
                continue
            g = adj.pop(i)
            if not self.tracked[i]:
                continue
            ins = self.inputs[i]
            vals = [self.values[j] for j in ins]
            grads = OPS[self.ops[i]].vjp(g, vals, self.values[i], self.attrs[i])
            for j, gj in zip(ins, grads):
                if not self.tracked[j]:
                    continue
                if j in adj:
                    adj[j] = adj[j] + gj
                else:
                    adj[j] = gj
        targets = [v.index for v in wrt] if wrt is not None else self.leaves
        return [adj[j] if j in adj else np.zeros_like(self.values[j]) for j in targets]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; used to check tape integrity."""
        out: list[np.ndarray] = []
        for op, ins, attrs, val in zip(self.ops, self.inputs, self.attrs, self.values):
            if op == "leaf":
                out.append(val)
            else:
                out.append(np.asarray(OPS[op].forward([out[j] for j in ins], attrs),
                                      dtype=np.float64))
        return out


def record(tape: Tape, op: str, inputs: Sequence[Var], **attrs) -> Var:
    return tape.record(op, inputs, **attrs)


def backward(tape: Tape, root: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
    return tape.backward(root, wrt)


def stop_gradient(x):
    if isinstance(x, Var):
        return x.tape.stop_gradient(x)
    return x


# ---------------------------------------------------------------------------
# dual-path helpers


def _unary(op, np_fn):
    def fn(x):
        if isinstance(x, Var):
            return x.tape.record(op, [x])
        return np_fn(as_array(x))
    fn.__name__ = op.replace("-", "_")
    return fn


sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
exp = _unary("exp", np.exp)
log = _unary("log", np.log)
sqrt = _unary("sqrt", np.sqrt)
relu = _unary("max-with-zero", lambda x: np.maximum(x, 0.0))
silu = _unary("silu", lambda x: _fwd_silu([x], {}))
square = _unary("square", lambda x: x * x)
norm = _unary("l2-norm", lambda x: _fwd_norm([x], {}))


def softplus(x, beta: float = SOFTPLUS_BETA):
    if isinstance(x, Var):
        return x.tape.record("softplus", [x], beta=beta)
    return _fwd_softplus([as_array(x)], {"beta": beta})


def sigmoid(x, beta: float = 1.0):
    if isinstance(x, Var):
        return x.tape.record("sigmoid", [x], beta=float(beta))
    return _sigmoid(beta * as_array(x))


def maximum(x, c: float):
    if isinstance(x, Var):
        return x.tape.record("max-with-const", [x], c=float(c))
    return np.maximum(x, float(c))


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def matvec(M, v):
    """Apply matrix ``M`` (m, n) to the last axis of ``v`` (..., n)."""
    tape = _tape_of(M, v)
    if tape is None:
        return rowwise_matvec(M, v)
    M = M if isinstance(M, Var) else tape.const(M)
    v = v if isinstance(v, Var) else tape.const(v)
    return tape.record("matvec", [M, v])


def dot(a, b):
    """Inner product over the last axis."""
    tape = _tape_of(a, b)
    if tape is None:
        return rowwise_dot(a, b)
    a = a if isinstance(a, Var) else tape.const(a)
    b = b if isinstance(b, Var) else tape.const(b)
    return tape.record("dot", [a, b])


def sum(x, axis: int | None = None):  # noqa: A001 - mirrors np.sum
    if isinstance(x, Var):
        return x.tape.record("sum", [x], axis=axis)
    return np.sum(x, axis=axis)


def sqnorm(x):
    """Squared Euclidean norm over the last axis."""
    return dot(x, x)


def expand(x, axis: int):
    if isinstance(x, Var):
        return x.tape.record("expand", [x], axis=axis)
    return np.expand_dims(x, axis)


def reshape(x, shape):
    if isinstance(x, Var):
        return x.reshape(tuple(shape))
    return np.reshape(x, shape)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else as_array(x)


# ---------------------------------------------------------------------------
# finite-difference check


def fd_gradient(fn: Callable[[np.ndarray], float], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    point = as_array(point)
    grad = np.zeros_like(point)
    flat = grad.reshape(-1)
    for i in range(point.size):
        e = np.zeros_like(point)
        e.reshape(-1)[i] = step
        flat[i] = (float(fn(point + e)) - float(fn(point - e))) / (2.0 * step)
    return grad


def tape_gradient(fn: Callable, point: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``fn`` on a fresh tape at ``point``; return (value, gradient)."""
    tape = Tape()
    x = tape.leaf(point)
    out = fn(x)
    (g,) = tape.backward(out, [x])
    return float(out.value), g


def relative_error(a: np.ndarray, b: np.ndarray, atol: float = 1e-12) -> float:
    """Component-wise relative error.

    Components much smaller than the largest one are measured against
    1e-4 of the largest magnitude (and never against less than ``atol``),
    so entries that are zero up to finite-difference noise do not blow the
    ratio up.
    """
    a, b = as_array(a), as_array(b)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(b))), float(np.max(np.abs(a))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(1e-4 * scale, atol))
    return float(np.max(np.abs(a - b) / denom))


def grad_check(fn: Callable, point, fd_step: float = 1e-5) -> float:
    """Max component-wise relative error between tape and central-difference gradients.

    ``fn`` must work on both a :class:`Var` and a plain array (write it with
    the helpers from this module).
    """
    point = as_array(point)
    val, g = tape_gradient(fn, point)
    fd = fd_gradient(lambda p: value(fn(p)), point, fd_step)
    if not (np.isfinite(val) and np.all(np.isfinite(g)) and np.all(np.isfinite(fd))):
        raise FloatingPointError("non-finite value during gradient check")
    return relative_error(g, fd)
