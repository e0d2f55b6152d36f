"""Minimal dense-tensor reverse-mode differentiation engine.

Just enough for a graph attention forecaster: float64 numpy buffers, a
dynamic computation graph rebuilt per batch, and backward closures per
op. Broadcasting is supported for elementwise ops and stacked matmul;
there are no GPU kernels and no graph optimization.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class ShapeMismatch(NumericError):
    pass


class EmptyMaskRow(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class BackwardTwice(NumericError):
    pass


class Tensor:
    """A node in the computation graph.

    ``parents`` holds (tensor, pullback) pairs; a pullback maps the
    output gradient to this parent's gradient contribution.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents")

    def __init__(self, value, requires_grad: bool = False, parents=()):
        # contiguity matters: grad_check perturbs entries through a flat view
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p, _ in parents)
        self.parents = tuple(parents) if self.requires_grad else ()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.grad is not None})"

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Visits each node once in reverse topological order. Calling
        backward twice on the same graph raises BackwardTwice; rebuild
        the graph instead.
        """
        if self.value.size != 1:
            raise NonScalarLoss(f"loss has shape {self.value.shape}")
        if self.grad is not None:
            raise BackwardTwice("backward already ran on this graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if parent.requires_grad:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            g = node.grad
            for parent, pullback in node.parents:
                if not parent.requires_grad:
                    continue
                contrib = pullback(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += contrib


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value
    return Tensor(out, parents=[
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value
    return Tensor(out, parents=[
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value
    return Tensor(out, parents=[
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ])


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.value, parents=[(a, lambda g: -g)])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return Tensor(out, parents=[
        (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value ** 2),
                                   b.value.shape)),
    ])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch("matmul needs >= 2-D operands")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeMismatch(f"matmul {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)

    return Tensor(out, parents=[(a, grad_a), (b, grad_b)])


def concat_last_dim(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=-1)
    parents = []
    offset = 0
    for t in tensors:
        width = t.value.shape[-1]
        lo, hi = offset, offset + width

        def pull(g, lo=lo, hi=hi):
            return g[..., lo:hi]

        parents.append((t, pull))
        offset += width
    return Tensor(out, parents=parents)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    # derivative at exactly 0 is defined as 1
    deriv = np.where(a.value < 0, slope, 1.0)
    out = np.where(a.value < 0, slope * a.value, a.value)
    return Tensor(out, parents=[(a, lambda g: g * deriv)])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))  # overflow-safe logistic
    return Tensor(out, parents=[(a, lambda g: g * out * (1.0 - out))])


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, parents=[(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.value)
    return Tensor(out, parents=[(a, lambda g: g / a.value)])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return Tensor(out, parents=[(a, pull)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.value.size
    else:
        count = a.value.shape[axis]
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape) / count
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape) / count

    return Tensor(out, parents=[(a, pull)])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.value.reshape(shape)
    return Tensor(out, parents=[(a, lambda g: g.reshape(a.value.shape))])


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.value, axes)
    inv = np.argsort(axes)
    return Tensor(out, parents=[(a, lambda g: np.transpose(g, inv))])


def masked_softmax(a, mask) -> Tensor:
    """Softmax over the last axis restricted to unmasked entries.

    Masked entries come out exactly 0; every row must keep at least one
    unmasked entry. The row max is subtracted before exponentiation.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.value.shape)
    if not mask.any(axis=-1).all():
        raise EmptyMaskRow("a softmax row has no unmasked entries")
    neg_inf = np.where(mask, a.value, -np.inf)
    rowmax = neg_inf.max(axis=-1, keepdims=True)
    z = np.where(mask, np.exp(a.value - rowmax), 0.0)
    p = z / z.sum(axis=-1, keepdims=True)

    def pull(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - dot)

    return Tensor(p, parents=[(a, pull)])


def grad_check(fn, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every entry of every parameter.

    ``fn`` must rebuild its graph from the params' current values on
    each call and return a scalar Tensor. Not valid at points where an
    activation kink sits exactly at the evaluation point.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.array(p.grad, copy=True) if p.grad is not None
                else np.zeros_like(p.value) for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().value)
            flat[i] = orig - h
            down = float(fn().value)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = an.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
