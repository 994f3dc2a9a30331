"""Reverse-mode automatic differentiation over numpy arrays.

Tensors record the ops that produced them; calling backward() on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into every tensor with requires_grad set. Storage follows the
input arrays' dtype (float32 in training, float64 in the verification
paths); reductions always accumulate in 64-bit.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Ownership transfer is safe: gradients are never mutated in
            # place, only replaced on re-accumulation.
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; the functional forms below do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Matrix product (..., k) @ (k, n); the right operand must be 2-D.

    Higher-rank left operands are flattened to one gemm call rather than
    dispatched as a loop of small products.
    """
    if w.data.ndim != 2:
        raise ValueError("matmul right operand must be 2-D")
    if a.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {w.data.shape}")
    lead = a.data.shape[:-1]
    a2 = np.ascontiguousarray(a.data).reshape(-1, a.data.shape[-1])
    out_data = (a2 @ w.data).reshape(*lead, w.data.shape[1])
    if not _tracked(a, w):
        return Tensor(out_data)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
        if a.requires_grad or a._parents:
            a._accumulate((g2 @ w.data.T).reshape(a.data.shape))
        if w.requires_grad or w._parents:
            w._accumulate(a2.T @ g2)

    return Tensor(out_data, parents=(a, w), backward=backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(g * (1.0 - out_data * out_data))

    return Tensor(out_data, parents=(x,), backward=backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(g * out_data)

    return Tensor(out_data, parents=(x,), backward=backward)


def absolute(x: Tensor) -> Tensor:
    out_data = np.abs(x.data)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return Tensor(out_data, parents=(x,), backward=backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return Tensor(out_data, parents=(x,), backward=backward)


def square(x: Tensor) -> Tensor:
    out_data = x.data * x.data
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(g * (2.0 * x.data))

    return Tensor(out_data, parents=(x,), backward=backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out_data = x.data.sum(axis=axis, dtype=np.float64).astype(x.data.dtype)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return Tensor(out_data, parents=(x,), backward=backward)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tensor_sum(x, axis=axis), 1.0 / count)


def l2norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along `axis`, with zero subgradient at the origin."""
    sq = (x.data.astype(np.float64) ** 2).sum(axis=axis)
    out_data = np.sqrt(sq).astype(x.data.dtype)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        denom = np.where(out_data == 0, 1.0, out_data)
        scale = (g / denom).astype(x.data.dtype)
        x._accumulate(np.expand_dims(scale, axis) * x.data)

    return Tensor(out_data, parents=(x,), backward=backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out_data = x.data.reshape(shape)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return Tensor(out_data, parents=(x,), backward=backward)


def transpose01(x: Tensor) -> Tensor:
    """Swap the first two axes (batch-major <-> vertex-major)."""
    out_data = np.ascontiguousarray(np.swapaxes(x.data, 0, 1))
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(np.ascontiguousarray(np.swapaxes(g, 0, 1)))

    return Tensor(out_data, parents=(x,), backward=backward)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice [start, start+size) along `axis`."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    out_data = x.data[index]
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return Tensor(out_data, parents=(x,), backward=backward)


def laplacian_apply(op, x: Tensor) -> Tensor:
    """Multiply a symmetric sparse operator into the leading vertex axis.

    Accepts (V, F) inputs or vertex-major (V, B, F) batches, which keep
    the sparse product a single reshape-free call; `op` must expose
    matrix(dtype) returning a scipy sparse matrix.
    """
    mat = op.matrix(x.data.dtype)

    def apply(arr):
        if arr.ndim == 2:
            return mat @ arr
        shape = arr.shape
        flat = np.ascontiguousarray(arr).reshape(shape[0], -1)
        return (mat @ flat).reshape(shape)

    out_data = apply(x.data)
    if not _tracked(x):
        return Tensor(out_data)

    def backward(g):
        x._accumulate(apply(g))  # symmetric operator: transpose equals itself

    return Tensor(out_data, parents=(x,), backward=backward)
