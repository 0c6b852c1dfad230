"""Reverse-mode automatic differentiation on dense numpy-backed tensors.

A ``Tape`` records every differentiable operation executed while it is
active; ``backward`` replays the record once, in reverse, accumulating
gradients into each tensor's ``grad`` field. With no active tape all
operations run in inference mode and record nothing.

Training runs in float32; tests build float64 tensors to compare against
finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float32

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional array with an optional gradient.

    ``requires_grad`` marks trainable leaves; intermediate results get the
    flag set automatically when they depend on one inside an active tape.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of differentiable operations.

    Operations append themselves in execution order, so the record is
    topologically sorted by construction and one reverse sweep visits each
    node exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)


def record(out: Tensor, inputs, backward_fn) -> None:
    """Attach a backward closure to ``out`` if a tape is active and needed.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, in order.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    out.requires_grad = True
    tape._nodes.append(_Node(out, inputs, backward_fn))
    tape._produced.add(id(out))


def backward(output: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every tensor the scalar ``output`` depends on.

    Gradients accumulate by summation across fan-out. Each recorded
    operation is visited exactly once, in reverse execution order.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if id(output) not in tape._produced:
        raise ContractError("output was not produced on this tape")
    output.grad = np.ones_like(output.data)
    for node in reversed(tape._nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = g
            else:
                inp.grad = inp.grad + g


def _lift(value, ref_dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref_dtype))


def _ref_dtype(*values):
    for v in values:
        if isinstance(v, Tensor):
            return v.dtype
    return DEFAULT_DTYPE


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    dtype = _ref_dtype(a, b)
    a, b = _lift(a, dtype), _lift(b, dtype)
    out = Tensor(a.data + b.data)

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), bwd)
    return out


def sub(a, b) -> Tensor:
    dtype = _ref_dtype(a, b)
    a, b = _lift(a, dtype), _lift(b, dtype)
    out = Tensor(a.data - b.data)

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), bwd)
    return out


def mul(a, b) -> Tensor:
    dtype = _ref_dtype(a, b)
    a, b = _lift(a, dtype), _lift(b, dtype)
    out = Tensor(a.data * b.data)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    record(out, (a,), lambda g: (-g,))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        return (g * (a.data > 0),)

    record(out, (a,), bwd)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    record(out, (a,), bwd)
    return out


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient routes to the first occurrence of the max."""
    out = Tensor(a.data.max(axis=axis, keepdims=keepdims))

    def bwd(g):
        ga = np.zeros_like(a.data)
        if axis is None:
            flat_idx = int(np.argmax(a.data))
            ga.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
        else:
            idx = np.argmax(a.data, axis=axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return (ga,)

    record(out, (a,), bwd)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp along one axis (max subtraction)."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    lse = m + np.log(total)
    out = Tensor(lse if keepdims else np.squeeze(lse, axis=axis))

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * (shifted / total),)

    record(out, (a,), bwd)
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                grads.append(g[tuple(index)])
            else:
                grads.append(None)
        return grads

    record(out, tuple(tensors), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    record(out, (a,), lambda g: (g.reshape(a.data.shape),))
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError("transpose2d expects a 2-d tensor")
    out = Tensor(np.ascontiguousarray(a.data.T))
    record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))
    return out
