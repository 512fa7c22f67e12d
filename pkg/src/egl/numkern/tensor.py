"""Reverse-mode automatic differentiation over a dynamic tape.

Tensors hold float64 numpy arrays of rank <= 2.  Operations executed inside a
``with Tape() as tape`` block record themselves in construction order, which
is a topological order of the computation; ``backward(tape, loss)`` replays it
once in reverse and returns gradients for every tensor built with
``requires_grad=True``.  Outside a tape, operations are plain forward math.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A float64 array (rank <= 2) plus the links needed for backprop."""

    __slots__ = ("data", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ValueError(f"tensors are limited to rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # (parent, vjp) pairs; populated only for nodes recorded on a tape
        self._vjps: tuple[tuple["Tensor", Callable[[np.ndarray], np.ndarray]], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


class Tape:
    """Ordered record of every gradient-relevant op run inside its context."""

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape contexts must nest properly"

    def __len__(self) -> int:
        return len(self._nodes)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _record(out: Tensor, vjps: Sequence[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]) -> Tensor:
    """Attach vjp links if any input participates in differentiation."""
    if _TAPE_STACK:
        live = tuple((p, fn) for p, fn in vjps if p.requires_grad or p._vjps)
        if live:
            out._vjps = live
            out.requires_grad = True
            _TAPE_STACK[-1]._nodes.append(out)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep: exact gradients of ``loss`` for all requires_grad leaves.

    ``loss`` must be a scalar recorded on ``tape``.  Each tape node is visited
    exactly once, in reverse construction order.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._vjps == () and loss not in tape._nodes:
        raise ValueError("loss does not depend on any differentiable input on this tape")

    partials: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad and not loss._vjps:
        leaf_grads[loss] = np.array(1.0)
    for node in reversed(tape._nodes):
        g = partials.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node._vjps:
            contrib = vjp(g)
            if parent._vjps:
                acc = partials.get(id(parent))
                partials[id(parent)] = contrib if acc is None else acc + contrib
            elif parent.requires_grad:
                if parent in leaf_grads:
                    leaf_grads[parent] = leaf_grads[parent] + contrib
                else:
                    leaf_grads[parent] = np.array(contrib, dtype=np.float64)
    return leaf_grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(-g, b.data.shape))])


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, [(a, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def grad_a(g: np.ndarray) -> np.ndarray:
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd)
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T
        return g * bd  # 1-D dot

    def grad_b(g: np.ndarray) -> np.ndarray:
        if ad.ndim == 2 and bd.ndim == 2:
            return ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return np.outer(ad, g)
        return g * ad

    return _record(out, [(a, grad_a), (b, grad_b)])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out = Tensor(np.concatenate(datas, axis=axis))
    offsets = np.cumsum([0] + [d.shape[axis] for d in datas])

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g: np.ndarray) -> np.ndarray:
            index: list = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # branch form avoids exp overflow for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = np.atleast_1d(a.data)
    s = _sigmoid_stable(x).reshape(a.data.shape)
    out = Tensor(s)
    return _record(out, [(a, lambda g: g * s * (1.0 - s))])


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)
    return _record(out, [(a, lambda g: g * (1.0 - t * t))])


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, [(a, lambda g: g * e)])


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, [(a, lambda g: g / a.data)])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    clipped = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    out = Tensor(clipped)
    return _record(out, [(a, lambda g: g * inside)])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return s * (g - dot)

    return _record(out, [(a, vjp)])


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    total = np.sum(e, axis=axis, keepdims=True)
    val = np.squeeze(m + np.log(total), axis=axis)
    soft = e / total
    out = Tensor(val)
    return _record(out, [(a, lambda g: np.expand_dims(g, axis) * soft)])


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis))

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()

    return _record(out, [(a, vjp)])


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(np.mean(a.data, axis=axis))

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g / count, a.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape) / count

    return _record(out, [(a, vjp)])


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``a[indices]``; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _record(out, [(a, vjp)])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the tape's 'slice' primitive)."""
    index: list = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    key = tuple(index)
    out = Tensor(a.data[key])

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a.data)
        full[key] = g
        return full

    return _record(out, [(a, vjp)])


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    return _record(out, [(a, lambda g: g.T)])


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, [(a, lambda g: g.reshape(a.data.shape))])
