"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every trainable component in the package (saliency networks, deformation
fields, the ABR policy) is a composition of the primitives below, so one
gradient engine serves them all. Shapes are ordinary numpy shapes; matmul is
restricted to 2-D operands, everything elementwise broadcasts like numpy.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph: a value plus backward plumbing."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def backward(self, seed=None):
        """Accumulate gradients of a scalar (or seeded) output into leaves."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.value.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _accum(node, grad):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += grad


# primitives ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    value = a.value + b.value

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Tensor(value, parents=(a, b), backward=backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    value = a.value * b.value

    def backward(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return Tensor(value, parents=(a, b), backward=backward)


def pow_(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    value = a.value ** e

    def backward(g):
        _accum(a, g * e * a.value ** (e - 1.0))

    return Tensor(value, parents=(a,), backward=backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    value = a.value @ b.value

    def backward(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Tensor(value, parents=(a, b), backward=backward)


def transpose(a):
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ValueError("transpose supports 2-D tensors only")

    def backward(g):
        _accum(a, g.T)

    return Tensor(a.value.T, parents=(a,), backward=backward)


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0.0

    def backward(g):
        _accum(a, g * mask)

    return Tensor(a.value * mask, parents=(a,), backward=backward)


def exp(a):
    a = as_tensor(a)
    value = np.exp(a.value)

    def backward(g):
        _accum(a, g * value)

    return Tensor(value, parents=(a,), backward=backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.value)

    return Tensor(np.log(a.value), parents=(a,), backward=backward)


def sigmoid(a):
    a = as_tensor(a)
    value = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                     np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))

    def backward(g):
        _accum(a, g * value * (1.0 - value))

    return Tensor(value, parents=(a,), backward=backward)


def softplus(a):
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.value)

    def backward(g):
        _accum(a, g / (1.0 + np.exp(-a.value)))

    return Tensor(value, parents=(a,), backward=backward)


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.value)

    def backward(g):
        _accum(a, g * sign)

    return Tensor(np.abs(a.value), parents=(a,), backward=backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            grad = np.full_like(a.value, float(g))
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            grad = np.broadcast_to(g_exp, a.value.shape).copy()
        _accum(a, grad)

    return Tensor(value, parents=(a,), backward=backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis):
    """Max over one axis; ties split their gradient evenly."""
    a = as_tensor(a)
    value = a.value.max(axis=axis)

    def backward(g):
        expanded = np.expand_dims(value, axis)
        mask = (a.value == expanded).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        _accum(a, mask * np.expand_dims(g, axis))

    return Tensor(value, parents=(a,), backward=backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        _accum(a, value * (g - dot))

    return Tensor(value, parents=(a,), backward=backward)


def smooth_l1(a):
    """0.5 x^2 inside |x|<1, |x|-0.5 outside; derivative clamped to [-1, 1]."""
    a = as_tensor(a)
    x = a.value
    inner = np.abs(x) < 1.0
    value = np.where(inner, 0.5 * x * x, np.abs(x) - 0.5)

    def backward(g):
        _accum(a, g * np.where(inner, x, np.sign(x)))

    return Tensor(value, parents=(a,), backward=backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return Tensor(value, parents=tuple(tensors), backward=backward)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.value.shape))

    return Tensor(a.value.reshape(shape), parents=(a,), backward=backward)


def gather(a, indices, axis=0):
    """Select rows (or slices along `axis`) by integer index, repeats allowed."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    value = np.take(a.value, indices, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.value)
        if axis == 0:
            np.add.at(grad, indices, g)
        else:
            moved = np.moveaxis(grad, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accum(a, grad)

    return Tensor(value, parents=(a,), backward=backward)


def slice1d(a, start, stop):
    """Contiguous slice of a 1-D tensor (used for flat parameter layouts)."""
    a = as_tensor(a)
    if a.value.ndim != 1:
        raise ValueError("slice1d expects a 1-D tensor")

    def backward(g):
        grad = np.zeros_like(a.value)
        grad[start:stop] = g
        _accum(a, grad)

    return Tensor(a.value[start:stop], parents=(a,), backward=backward)
