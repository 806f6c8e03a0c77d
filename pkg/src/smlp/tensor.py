"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation appends a record to the active :class:`Tape`.
``backward(loss)`` replays that tape in reverse exactly once and deposits
gradients on the leaf tensors that requested them. Storage is a contiguous
float64 numpy array; all reductions go through numpy with fixed shapes, so a
forward/backward pass is bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AutogradError, DegenerateBatchError, ShapeError, StaleTapeError

_local = threading.local()


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    inputs: tuple["Tensor", ...]
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable operations."""

    records: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def active_tape() -> Tape:
    stack = _tape_stack()
    if stack[-1].consumed:
        stack[-1] = Tape()
    return stack[-1]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def zeros(*shape: int) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(out_data)
    if not grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    tape = active_tape()
    for t in inputs:
        if t._tape is not None and t._tape is not tape:
            raise StaleTapeError("input was produced on a tape that is no longer active")
    out.requires_grad = True
    out._tape = tape
    tape.records.append(Node(inputs, out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise AutogradError("loss does not depend on any tensor that requires grad")
    if tape.consumed:
        raise StaleTapeError("tape already replayed; run a fresh forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                k = id(t)
                grads[k] = gi if k not in grads else grads[k] + gi
    tape.consumed = True
    tape.records.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record(out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with leading batch broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# indexing, slicing, concatenation


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}, {stop}) invalid for extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return _record(x.data[idx].copy(), (x,), bw)


def chunk(x: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    axis = _axis(x, axis)
    if n < 1 or x.shape[axis] % n:
        from .errors import DivisibilityError

        raise DivisibilityError(f"extent {x.shape[axis]} not divisible into {n} chunks")
    w = x.shape[axis] // n
    return [slice_axis(x, i * w, (i + 1) * w, axis) for i in range(n)]


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    axis = _axis(xs[0], axis)
    sizes = [t.shape[axis] for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return [p.copy() for p in np.split(g, cuts, axis=axis)]

    return _record(out, xs, bw)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (repeats allowed)."""
    axis = _axis(x, axis)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _record(np.take(x.data, index, axis=axis), (x,), bw)


def combine(parts: Sequence[tuple[Tensor, np.ndarray]], size: int, axis: int = 0) -> Tensor:
    """Scatter-add each ``part`` into positions ``index`` of a zero tensor.

    Parts are summed in the order given, which fixes the floating-point
    result independently of how they were produced.
    """
    tensors = tuple(p for p, _ in parts)
    idxs = [np.asarray(i, dtype=np.int64) for _, i in parts]
    if not tensors:
        raise ShapeError("combine needs at least one part")
    ref = tensors[0]
    axis = _axis(ref, axis)
    shape = list(ref.shape)
    shape[axis] = size
    out = np.zeros(shape)
    for t, idx in zip(tensors, idxs):
        sl = [slice(None)] * t.ndim
        sl[axis] = idx
        np.add.at(out, tuple(sl), t.data)

    def bw(g):
        return [np.take(g, idx, axis=axis) for idx in idxs]

    return _record(out, tensors, bw)


def take_along(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, index, g, axis=axis)
        return (full,)

    return _record(np.take_along_axis(x.data, index, axis=axis), (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction; masked-out entries get exactly zero."""
    v = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return (dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _record(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is true.

    ``logits`` is ``(..., V)``; ``targets`` and ``mask`` match its leading
    shape. Masked positions receive exactly zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError(f"target id out of range [0, {V})")
    m = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)
    m = np.broadcast_to(m, targets.shape)
    count = int(m.sum())
    if count == 0:
        raise DegenerateBatchError("every position is masked")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = np.where(m, nll, 0.0).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        d = (p - onehot) * (m[..., None] / count)
        return (d * g,)

    return _record(np.asarray(loss), (logits,), bw)
