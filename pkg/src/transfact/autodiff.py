"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records the op that produced it;
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates exact gradients. Only the ops the network needs are provided.
Broadcasting follows numpy; gradients of broadcast operands are summed
back to the operand's shape. Reductions run in numpy's fixed order, so
results are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = ["Tensor", "no_grad", "constant"]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the context (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return self._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(-g)

        return self._result(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return self._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return self._result(a.data / b.data, (a, b), backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return self._result(a.data @ b.data, (a, b), backward)

    def __getitem__(self, key) -> "Tensor":
        a = self
        parts = key if isinstance(key, tuple) else (key,)
        basic = all(isinstance(p, (slice, int)) for p in parts)

        def backward(g):
            full = np.zeros_like(a.data)
            if basic:  # basic indexing never repeats elements
                full[key] += g
            else:
                np.add.at(full, key, g)
            a._accumulate(full)

        return self._result(a.data[key], (a,), backward)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        a = self
        old = a.data.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return self._result(a.data.reshape(*shape), (a,), backward)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(np.swapaxes(g, ax1, ax2))

        return self._result(np.swapaxes(a.data, ax1, ax2), (a,), backward)

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        a = self
        inverse = tuple(int(i) for i in np.argsort(axes))

        def backward(g):
            a._accumulate(np.transpose(g, inverse))

        return self._result(np.transpose(a.data, axes), (a,), backward)

    def pad_axis(self, axis: int, before: int, after: int) -> "Tensor":
        """Zero-pad one axis."""
        a = self
        pads = [(0, 0)] * a.data.ndim
        pads[axis] = (before, after)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(before, before + a.data.shape[axis])
        sl = tuple(sl)

        def backward(g):
            a._accumulate(g[sl])

        return self._result(np.pad(a.data, pads), (a,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            grad = g
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            a._accumulate(np.broadcast_to(grad, a.data.shape).copy())

        return self._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        if axis is None:
            count = a.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([a.data.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return self._result(out_data, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return self._result(np.log(a.data), (a,), backward)

    def power(self, exponent: float) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

        return self._result(np.power(a.data, exponent), (a,), backward)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return self._result(np.where(mask, a.data, 0.0), (a,), backward)

    def clip_min(self, floor: float) -> "Tensor":
        """max(x, floor); gradient is zero where the floor is active."""
        a = self
        mask = a.data >= floor

        def backward(g):
            a._accumulate(g * mask)

        return self._result(np.maximum(a.data, floor), (a,), backward)

    def clip_max(self, ceil: float) -> "Tensor":
        a = self
        mask = a.data <= ceil

        def backward(g):
            a._accumulate(g * mask)

        return self._result(np.minimum(a.data, ceil), (a,), backward)

    # -- fused softmax family -------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        """Numerically stable softmax; exact because the shift is constant."""
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

        return self._result(out_data, (a,), backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse
        soft = np.exp(out_data)

        def backward(g):
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

        return self._result(out_data, (a,), backward)

    # -- gather ---------------------------------------------------------------

    def take_along_axis(self, indices: np.ndarray, axis: int) -> "Tensor":
        a = self
        idx = np.asarray(indices)

        def backward(g):
            full = np.zeros_like(a.data)
            grid = list(np.indices(idx.shape, sparse=True))
            grid[axis] = idx
            np.add.at(full, tuple(grid), g)
            a._accumulate(full)

        return self._result(np.take_along_axis(a.data, idx, axis=axis), (a,), backward)


def constant(data) -> Tensor:
    return Tensor(data)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    """Concatenate along an axis."""
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate(datas, axis=axis)

    def backward(g):
        for t, start, end in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, end)
                t._accumulate(g[tuple(sl)])

    return Tensor._result(out_data, tuple(tensors), backward)
