"""Dense tensors with tape-free reverse-mode differentiation.

Each :class:`Tensor` produced by a differentiable op keeps references to its
parents and a closure that pushes its gradient back to them.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.  Values are plain numpy arrays; the dtype of the inputs is preserved,
so float64 graphs are used for gradient checks and float32 for training.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autograd ------------------------------------------------------------
    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of an op; wire the graph only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return make_result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return make_result(a.data * b.data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return make_result(a.data**p, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: a._accumulate(g * y))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_result(y, (a,), lambda g: a._accumulate(g * y * (1 - y)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: a._accumulate(g * (1 - y * y)))


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    y = a.data * s

    def backward(g):
        a._accumulate(g * (s + y * (1 - s)))

    return make_result(y, (a,), backward)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    first, second = np.split(a.data, 2, axis=axis)
    s = _sigmoid(second)
    y = first * s

    def backward(g):
        a._accumulate(np.concatenate([g * s, g * first * s * (1 - s)], axis=axis))

    return make_result(y, (a,), backward)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            bd = b.data
            if bd.ndim == 1:
                a._accumulate(np.multiply.outer(g, bd))
            else:
                a._accumulate(g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            ad = a.data
            if b.data.ndim == 2 and ad.ndim > 2:
                # shared weight: fold batch dims into one matmul
                b._accumulate(ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            elif b.data.ndim == 1:
                b._accumulate(np.einsum("...i,...->i", ad, g))
            else:
                b._accumulate(np.swapaxes(ad, -1, -2) @ g)

    return make_result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(orig)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.transpose(a.data, axes), (a,), lambda g: a._accumulate(np.transpose(g, inverse))
    )


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return make_result(a.data[idx], (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(part)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def take_along_time(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[n, index[n, t]]`` for an (N, T, ...) tensor and (N, T') index."""
    n_idx = np.arange(a.shape[0])[:, None]
    y = a.data[n_idx, index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (n_idx, index), g)
        a._accumulate(full)

    return make_result(y, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(a.data, axis)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make_result(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = a.data - _logsumexp(a.data, axis)
    p = np.exp(y)

    def backward(g):
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return make_result(y, (a,), backward)


# ---------------------------------------------------------------------------
# numpy helpers
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)
