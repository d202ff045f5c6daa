"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the graph once in reverse topological order and accumulates exact
gradients into every node that requires them. Non-differentiable points
use one-sided subgradients: hinge kinks and clamp boundaries propagate 0.

The engine is deliberately small: only the operations the anomaly
pipeline needs exist, all in double precision so finite-difference
checks are meaningful.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

Array = np.ndarray

# When a probe list is active, kinked ops (hinge, leaky, clip) record how
# far their inputs sit from the nearest non-differentiable point. Finite
# difference harnesses use this to certify that no kink lies inside the
# FD stencil at the checked operating point.
_KINK_MARGINS: list[float] | None = None


class kink_probe:
    """Context manager that collects kink distances from subsequent ops."""

    def __enter__(self) -> list[float]:
        global _KINK_MARGINS
        _KINK_MARGINS = []
        return _KINK_MARGINS

    def __exit__(self, *exc) -> None:
        global _KINK_MARGINS
        _KINK_MARGINS = None


def _record_margin(distances: Array) -> None:
    if _KINK_MARGINS is not None and distances.size:
        _KINK_MARGINS.append(float(np.min(distances)))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Array | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValidationError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)

        # Iterative post-order topological sort; graphs can be deep.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)

    # Operator sugar. Every overload routes through a module-level op.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def lift(x) -> Tensor:
    """Wrap a constant as a Tensor; Tensors pass through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _accumulate(node: Tensor, grad: Array) -> None:
    node.grad = grad if node.grad is None else node.grad + grad


def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    an, bn = a.data.ndim, b.data.ndim
    if an not in (1, 2) or bn not in (1, 2):
        raise ValidationError("matmul supports 1-D and 2-D operands only")
    data = a.data @ b.data

    def backward(g):
        if an == 2 and bn == 2:
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        elif an == 2 and bn == 1:
            if a.requires_grad:
                _accumulate(a, np.outer(g, b.data))
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        elif an == 1 and bn == 2:
            if a.requires_grad:
                _accumulate(a, b.data @ g)
            if b.requires_grad:
                _accumulate(b, np.outer(a.data, g))
        else:  # vector dot product
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, g * a.data)

    return _make(data, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    if a.data.size == 0:
        raise ValidationError("mean over an empty tensor")
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = lift(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = lift(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = lift(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = lift(a)
    data = np.power(a.data, exponent)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * exponent * np.power(a.data, exponent - 1.0))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = lift(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow; gradient is sigmoid(x)."""
    a = lift(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            _accumulate(a, g * s)

    return _make(data, (a,), backward)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = lift(a)
    _record_margin(np.abs(a.data))
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * np.where(mask, 1.0, slope))

    return _make(data, (a,), backward)


def hinge(a) -> Tensor:
    """max(0, x) with subgradient 0 at the kink."""
    a = lift(a)
    _record_margin(np.abs(a.data))
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient is 0 at and beyond the boundaries."""
    a = lift(a)
    _record_margin(np.minimum(np.abs(a.data - lo), np.abs(a.data - hi)))
    data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(data, (a,), backward)


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Normalize each row to unit L2 norm; rejects near-zero rows."""
    a = lift(a)
    mat = a if a.data.ndim == 2 else reshape(a, (1, a.data.size))
    sq = tsum(mul(mat, mat), axis=1, keepdims=True)
    norms = np.sqrt(sq.data)
    if np.any(norms < eps):
        raise ValidationError("cannot normalize a zero-norm row")
    out = mul(mat, pow_const(sq, -0.5))
    return out if a.data.ndim == 2 else reshape(out, a.data.shape)
