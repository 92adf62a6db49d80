"""Dense float64 tensor math with a reverse-mode gradient tape.

Operations accept either plain ``numpy`` arrays or :class:`Var` handles.  When
any input is a ``Var`` the result is a ``Var`` recorded on that input's
:class:`Tape`; otherwise the op returns a plain array.  The same model and
loss code therefore runs both under differentiation and as a bare numeric
function (which is what the finite-difference checker relies on).

Only the broadcasting needed downstream is supported: ``(m, n) + (n,)`` bias
rows and scalar constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

NORM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


@dataclass
class _Node:
    op: str
    forward: Callable | None
    backward: Callable | None
    inputs: tuple
    values: tuple
    kwargs: dict
    output: np.ndarray


@dataclass
class Tape:
    """Ordered record of executed ops; parameters are leaf nodes with a name."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def param(self, name: str, value) -> "Var":
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, name)
        var = self._push(_Node("param", None, None, (), (), {}, arr))
        var.name = name
        self.params[name] = var.index
        return var

    def _push(self, node: _Node) -> "Var":
        self.nodes.append(node)
        return Var(node.output, self, len(self.nodes) - 1)

    def replay(self) -> bool:
        """Re-run every recorded op from its recorded leaves; True if all outputs match bit for bit."""
        outputs: list[np.ndarray] = []
        ok = True
        for node in self.nodes:
            if node.forward is None:
                outputs.append(node.output)
                continue
            vals = [
                outputs[x.index] if isinstance(x, Var) else v
                for x, v in zip(node.inputs, node.values)
            ]
            out = node.forward(*vals, **node.kwargs)
            ok &= out.shape == node.output.shape and out.tobytes() == node.output.tobytes()
            outputs.append(out)
        return bool(ok)


class Var:
    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar constant is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise GradientError(f"non-finite values entering {where}")


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("cannot combine variables from different tapes")
    return tape


def _apply(op: str, forward, backward, inputs, **kwargs):
    vals = tuple(value(x) for x in inputs)
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise GradientError(f"non-finite values entering {op}")
    out = forward(*vals, **kwargs)
    tape = _tape_of(inputs)
    if tape is None:
        return out
    return tape._push(_Node(op, forward, backward, tuple(inputs), vals, kwargs, out))


# ---------------------------------------------------------------- primitives


def _matmul_f(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _matmul_b(g, out, a, b):
    return g @ b.T, a.T @ g


def matmul(a, b):
    """Matrix product of an ``m x k`` and a ``k x n`` operand."""
    return _apply("matmul", _matmul_f, _matmul_b, (a, b))


def _transpose_f(a):
    return np.ascontiguousarray(a.T)


def transpose(a):
    return _apply("transpose", _transpose_f, lambda g, out, a: (g.T,), (a,))


def _add_f(a, b):
    if a.shape == b.shape or b.ndim == 0 or (a.ndim == 2 and b.shape == (a.shape[1],)):
        return a + b
    raise ShapeError(f"add: unsupported shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    return g.sum(axis=0)


def add(a, b):
    return _apply("add", _add_f, lambda g, out, a, b: (g, _unbroadcast(g, b.shape)), (a, b))


def sub(a, b):
    return _apply(
        "sub", lambda a, b: _add_f(a, -b), lambda g, out, a, b: (g, -_unbroadcast(g, b.shape)), (a, b)
    )


def _mul_f(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} and {b.shape}")
    return a * b


def mul(a, b):
    """Elementwise product of equally shaped operands."""
    return _apply("mul", _mul_f, lambda g, out, a, b: (g * b, g * a), (a, b))


def scale(x, c: float):
    return _apply("scale", lambda x, c: x * c, lambda g, out, x, c: (g * c,), (x,), c=float(c))


def relu(x):
    """Elementwise ``max(x, 0)``; the subgradient at 0 is 0."""
    return _apply("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0.0),), (x,))


def _norm_f(x, eps):
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return x / np.maximum(n, eps)


def _norm_b(g, out, x, eps):
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    big = n >= eps
    radial = np.sum(out * g, axis=1, keepdims=True)
    gx = np.where(big, (g - out * radial) / np.where(big, n, 1.0), g / eps)
    return (gx,)


def l2_normalize_rows(x, eps: float = NORM_EPS):
    """Divide each row by ``max(norm, eps)``.

    Returns ``(normalized, degenerate)`` where ``degenerate[i]`` is True for
    rows whose norm is below ``eps``.  An exactly-zero row maps to a zero row.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = value(x)
    if xv.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {xv.shape}")
    degenerate = np.sqrt(np.sum(xv * xv, axis=1)) < eps
    return _apply("l2_normalize_rows", _norm_f, _norm_b, (x,), eps=float(eps)), degenerate


def cosine_matrix(u, v):
    """Pairwise cosines of the rows of ``u`` (m x d) and ``v`` (n x d); zero rows give 0."""
    uv, vv = value(u), value(v)
    if uv.ndim != 2 or vv.ndim != 2 or uv.shape[1] != vv.shape[1]:
        raise ShapeError(f"cosine_matrix: feature dims differ {uv.shape} vs {vv.shape}")
    return matmul(l2_normalize_rows(u)[0], transpose(l2_normalize_rows(v)[0]))


def _lse_f(x, mask):
    if x.shape[-1] == 0:
        raise ValueError("logsumexp of an empty set")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("logsumexp: a row has no included entries")
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def _lse_b(g, out, x, mask):
    p = np.exp(x - out[..., None])
    if mask is not None:
        p = np.where(mask, p, 0.0)
    return (p * g[..., None],)


def logsumexp(x, mask: np.ndarray | None = None):
    """Stable ``log(sum(exp(x)))`` over the last axis (entries with ``mask`` False are excluded)."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return _apply("logsumexp", _lse_f, _lse_b, (x,), mask=mask)


def _sum_f(x, axis):
    return np.asarray(np.sum(x, axis=axis), dtype=np.float64)


def _sum_b(g, out, x, axis):
    if axis is None:
        return (np.full(x.shape, float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def sum(x, axis: int | None = None):  # noqa: A001
    return _apply("sum", _sum_f, _sum_b, (x,), axis=axis)


def mean(x):
    return scale(sum(x), 1.0 / value(x).size)


def _rowdot_f(a, b):
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"rowdot: shapes differ {a.shape} and {b.shape}")
    return np.sum(a * b, axis=1)


def rowdot(a, b):
    """Per-row dot product of two ``m x d`` matrices."""
    return _apply("rowdot", _rowdot_f, lambda g, out, a, b: (g[:, None] * b, g[:, None] * a), (a, b))


def _dotc_f(x, w):
    if x.shape != w.shape:
        raise ShapeError(f"weighted_sum: shapes differ {x.shape} and {w.shape}")
    return np.asarray(np.sum(x * w), dtype=np.float64)


def weighted_sum(x, w: np.ndarray):
    """``sum(w * x)`` with constant weights, giving a scalar."""
    w = np.asarray(w, dtype=np.float64)
    return _apply("weighted_sum", _dotc_f, lambda g, out, x, w: (g * w,), (x,), w=w)


def _take_b(g, out, x, idx):
    gx = np.zeros_like(x)
    np.add.at(gx, idx, g)
    return (gx,)


def take_rows(x, idx):
    """Rows ``x[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    return _apply("take_rows", lambda x, idx: x[idx], _take_b, (x,), idx=idx)


def _concat_b(g, out, *xs):
    grads, start = [], 0
    for x in xs:
        grads.append(g[:, start:start + x.shape[1]])
        start += x.shape[1]
    return tuple(grads)


def concat_cols(xs):
    def fwd(*vals):
        rows = {v.shape[0] for v in vals}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols: row counts differ {[v.shape for v in vals]}")
        return np.concatenate(vals, axis=1)

    return _apply("concat_cols", fwd, _concat_b, tuple(xs))


def _concat_rows_b(g, out, *xs):
    grads, start = [], 0
    for x in xs:
        grads.append(g[start:start + x.shape[0]])
        start += x.shape[0]
    return tuple(grads)


def concat_rows(xs):
    return _apply("concat_rows", lambda *vals: np.concatenate(vals, axis=0), _concat_rows_b, tuple(xs))


def reshape(x, shape: tuple):
    return _apply(
        "reshape", lambda x, shape: x.reshape(shape), lambda g, out, x, shape: (g.reshape(x.shape),), (x,),
        shape=tuple(shape),
    )


# ---------------------------------------------------------------- gradients


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Adjoint of ``loss`` with respect to every named parameter on ``tape``.

    Parameters the loss does not depend on get zero gradients.  Adjoints are
    accumulated in strict reverse execution order.
    """
    if not tape.nodes:
        raise GradientError("tape is empty")
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise GradientError("loss is not recorded on this tape")
    if loss.value.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.value.shape}")

    adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for i in range(loss.index, -1, -1):
        node = tape.nodes[i]
        if node.backward is None or i not in adj:
            continue
        g = adj.pop(i)
        grads = node.backward(g, node.output, *node.values, **node.kwargs)
        for x, gx in zip(node.inputs, grads):
            if isinstance(x, Var) and gx is not None:
                if x.index in adj:
                    adj[x.index] = adj[x.index] + gx
                else:
                    adj[x.index] = np.array(gx, dtype=np.float64)
    out = {}
    for name, idx in tape.params.items():
        g = adj.get(idx)
        shape = tape.nodes[idx].output.shape
        out[name] = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)
    return out


def value_and_grad(fn: Callable[[Mapping], object], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on a fresh tape; returns ``(float value, gradient map)``."""
    tape = Tape()
    leaves = {name: tape.param(name, p) for name, p in params.items()}
    loss = fn(leaves)
    if not isinstance(loss, Var):
        return float(loss), {name: np.zeros_like(np.asarray(p, dtype=np.float64)) for name, p in params.items()}
    return float(loss.value), backward(tape, loss)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: dict
    numeric: dict


def finite_diff_check(
    fn: Callable[[Mapping], object],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
    order: int = 2,
) -> GradCheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps a dict of parameters to a scalar and must be deterministic.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    and so keeps roundoff small on coordinates whose gradient is tiny.
    Pass ``analytic`` to check a gradient computed elsewhere.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        _, analytic = value_and_grad(fn, base)

    def f(p):
        out = float(value(fn(p)))
        if not np.isfinite(out):
            raise GradientError("function returned a non-finite value")
        return out

    numeric = {}
    worst = (0.0, "", ())
    for name, arr in base.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]

            def at(step):
                arr[idx] = orig + step
                return f(base)

            if order == 2:
                num[idx] = (at(h) - at(-h)) / (2.0 * h)
            else:
                num[idx] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
            arr[idx] = orig
            a = float(np.asarray(analytic[name])[idx])
            err = abs(a - num[idx]) / max(abs(a), abs(num[idx]), 1e-12)
            if err > worst[0]:
                worst = (err, name, idx)
        numeric[name] = num
    return GradCheckResult(worst[0], worst[1], worst[2], dict(analytic), numeric)
