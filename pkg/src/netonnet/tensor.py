"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active, so forward
passes outside a tape (inference, finite differences) cost nothing extra.

    with Tape() as tape:
        loss = reduce_sum(sigmoid(x))
    tape.backward(loss)
    x.grad   # d loss / d x
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape() -> Tape | None:
    tapes = _stack()
    return tapes[-1] if tapes else None


@dataclass
class _Entry:
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of operations; entries are appended in execution order,
    which is a topological order of the graph."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, output, inputs, backward, name):
        output._node = (self, len(self.entries))
        self.entries.append(_Entry(tuple(inputs), output, backward, name))

    def backward(self, loss: Tensor) -> None:
        backward(loss)


@contextmanager
def no_grad():
    """Suspend recording inside an enclosing tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_node")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, inputs, backward, name) -> Tensor:
    """Wrap an op result and record it when a tape is active and any input needs grad."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.shape == b.shape or not b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(r, k) @ (k, c) with fixed summation order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.values, b.values

    def back(g):
        ga = kernels.matmul(g, np.ascontiguousarray(bv.T)) if a.requires_grad else None
        gb = kernels.matmul(np.ascontiguousarray(av.T), g) if b.requires_grad else None
        return ga, gb

    return _make(kernels.matmul(av, bv), (a, b), back, "matmul")


def batched_matmul(x: Tensor, w: Tensor) -> Tensor:
    """(c, b, d1) @ (c, d1, d2) -> (c, b, d2), one independent product per stack slice."""
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"batched_matmul: expected 3-d operands, got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[0] or x.shape[2] != w.shape[1]:
        raise DimensionError(f"batched_matmul: shapes {x.shape} and {w.shape} are not aligned")
    xv, wv = x.values, w.values

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gx = kernels.batched_matmul(g, np.ascontiguousarray(wv.transpose(0, 2, 1)))
        if w.requires_grad:
            gw = kernels.batched_matmul(np.ascontiguousarray(xv.transpose(0, 2, 1)), g)
        return gx, gw

    return _make(kernels.batched_matmul(xv, wv), (x, w), back, "batched_matmul")


# ------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.values * c, (x,), lambda g: (g * c,), "scale")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias, where bias broadcasts over x without changing its shape."""
    try:
        ok = np.broadcast_shapes(x.shape, bias.shape) == x.shape
    except ValueError:
        ok = False
    if not ok:
        raise DimensionError(f"bias_add: bias {bias.shape} does not fit {x.shape}")
    return add(x, bias)


# ------------------------------------------------------------- pointwise

def _kink_log(name, mask):
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append((name, mask))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    _kink_log("relu", mask)
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid_values(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.values)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def pointwise(x: Tensor, kernel: str) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[kernel]
    except KeyError:
        raise ValueError(f"unknown pointwise kernel {kernel!r}") from None
    return fn(x)


def log(x: Tensor) -> Tensor:
    v = x.values
    return _make(np.log(v), (x,), lambda g: (g / v,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the value was inside."""
    inside = (x.values >= lo) & (x.values <= hi)
    _kink_log("clip", inside)
    return _make(np.clip(x.values, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back, "softmax")


# -------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack: shape {t.shape} differs from {shape}")
    ax = axis % (len(shape) + 1)
    return _make(np.stack([t.values for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))), "stack")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.values.sum(axis=axis, keepdims=keepdims), (x,), back, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.values.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        v = x.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {shape}") from None
    return _make(v, (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)

    return _make(x.values[key], (x,), back, "getitem")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows ``table[index]``; backward scatter-adds into touched rows only."""
    index = np.ascontiguousarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"take_rows: index out of range [0, {n})")
    tshape = table.shape

    def back(g):
        full = np.zeros(tshape)
        kernels.scatter_add_rows(full, index.reshape(-1),
                                 np.ascontiguousarray(g.reshape(index.size, -1)))
        return (full,)

    return _make(table.values[index], (table,), back, "take_rows")


def bi_interaction(u: Tensor) -> Tensor:
    """Pool (b, m, d) into (b, d) as the sum over field pairs i<j of u_i * u_j."""
    if u.ndim != 3:
        raise DimensionError(f"bi_interaction: expected (b, m, d), got {u.shape}")
    uv = u.values
    return _make(kernels.bi_interaction(uv), (u,),
                 lambda g: (kernels.bi_interaction_grad(uv, np.ascontiguousarray(g)),), "bi_interaction")


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss has no recorded history; build it inside a Tape")
    tape, top = loss._node
    grads = {top: np.ones(loss.shape)}
    for i in range(top, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        entry = tape.entries[i]
        for inp, ig in zip(entry.inputs, entry.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            node = inp._node
            if node is not None and node[0] is tape:
                j = node[1]
                grads[j] = grads[j] + ig if j in grads else ig
            elif inp.grad is None:
                inp.grad = np.array(ig, dtype=np.float64, copy=True).reshape(inp.shape)
            else:
                inp.grad += ig


# -------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               refine_eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Each coordinate
    uses a central difference with step ``eps``; when that disagrees with the tape by
    more than 1e-6 relative, the estimate is replaced by a five-point stencil with step
    ``refine_eps``, whose error is far below central-difference roundoff on tiny
    gradients. Coordinates whose perturbation moves a relu or clip input across its
    kink are skipped.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    def evaluate():
        _state.kinks = []
        try:
            value = f().item()
            return value, _state.kinks
        finally:
            _state.kinks = None

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    _, base = evaluate()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        flat = p.values.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            a = analytic.reshape(-1)[k]

            def at(h):
                flat[k] = orig + h
                value, kinks = evaluate()
                flat[k] = orig
                return value, _same_masks(base, kinks)

            (fp, okp), (fm, okm) = at(eps), at(-eps)
            if not (okp and okm):
                continue
            err = rel(a, (fp - fm) / (2.0 * eps))
            if err > 1e-6:
                pts = [at(s * refine_eps) for s in (2, 1, -1, -2)]
                if all(ok for _, ok in pts):
                    f2, f1, m1, m2 = (v for v, _ in pts)
                    err = rel(a, (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * refine_eps))
            worst = max(worst, err)
    return worst


def _same_masks(a, b) -> bool:
    return len(a) == len(b) and all(x[1].shape == y[1].shape and np.array_equal(x[1], y[1])
                                    for x, y in zip(a, b))
