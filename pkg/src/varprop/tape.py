"""Reverse-mode differentiation over dense float64 arrays.

A light tape: each operation returns a new :class:`Tensor` holding the
forward value, references to its inputs, and a vector-Jacobian closure.
``backward`` walks the graph once in reverse topological order and
accumulates adjoints. Everything is double precision and row-major; the
variance recursion multiplies long chains of small terms and single
precision does not survive finite-difference checks.

Arrays enter the graph either as parameters (``parameter``) that collect
gradients or as constants (``constant``) that do not. Activation-gate
moments are always fed in as constants: they are updated in closed form
from the running mean pass, not by gradient descent.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy import special as _special

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; carries both shapes."""


def as_array(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray (0-d preserved)."""
    return np.asarray(x, dtype=np.float64, order="C")


class Tensor:
    """Graph node: cached forward value plus adjoint accumulator.

    ``_vjp`` maps the upstream adjoint to per-parent adjoint arrays, aligned
    with ``_parents``. ``needs_grad`` marks nodes on a path from a parameter,
    so backward skips constant-only branches.
    """

    __slots__ = ("value", "grad", "requires_grad", "needs_grad", "_parents", "_vjp")

    def __init__(self, value, *, requires_grad=False, parents=(), vjp=None):
        self.value = as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._vjp = vjp
        self.needs_grad = requires_grad or any(p.needs_grad for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are wrapped on the fly.
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

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def constant(value) -> Tensor:
    return Tensor(value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` (adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return Tensor(a.value * c, parents=(a,), vjp=vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * (2.0 * a.value),)

    return Tensor(a.value * a.value, parents=(a,), vjp=vjp)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the adjoint at 0 uses the 0 subgradient."""
    root = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore"):
            d = np.where(root > 0.0, 0.5 / np.where(root > 0.0, root, 1.0), 0.0)
        return (g * d,)

    return Tensor(root, parents=(a,), vjp=vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return Tensor(out, parents=(a,), vjp=vjp)


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (g / a.value,)

    return Tensor(np.log(a.value), parents=(a,), vjp=vjp)


def relu(a: Tensor) -> Tensor:
    """Max-with-zero; the adjoint at exactly 0 is 0 (unit off)."""
    mask = a.value > 0.0

    def vjp(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.value, 0.0), parents=(a,), vjp=vjp)


# ---------------------------------------------------------------------------
# Gaussian pdf / cdf (total functions, elementwise)

def normal_pdf(x: Tensor) -> Tensor:
    out = _INV_SQRT_2PI * np.exp(-0.5 * x.value * x.value)

    def vjp(g):
        return (g * (-x.value * out),)

    return Tensor(out, parents=(x,), vjp=vjp)


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF via scipy's ndtr (double-precision erf path)."""
    out = _special.ndtr(x.value)

    def vjp(g):
        return (g * (_INV_SQRT_2PI * np.exp(-0.5 * x.value * x.value)),)

    return Tensor(out, parents=(x,), vjp=vjp)


def normal_pdf_values(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def normal_cdf_values(x) -> np.ndarray:
    return _special.ndtr(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Linear algebra and reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shapes {a.value.shape} and {b.value.shape} do not conform")
    out = a.value @ b.value

    # A constant parent's adjoint is dropped by backward(), so skip the GEMM
    # that would produce it. Matters for conv patches built from fixed inputs.
    def vjp(g):
        return (
            g @ b.value.T if a.needs_grad else None,
            a.value.T @ g if b.needs_grad else None,
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.value.shape).copy(),)

    return Tensor(out, parents=(a,), vjp=vjp)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis (keeps the axis with extent 1)."""
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    softmax = shifted / total

    def vjp(g):
        return (g * softmax,)

    return Tensor(out, parents=(a,), vjp=vjp)


# ---------------------------------------------------------------------------
# Indexing and shape

def gather(a: Tensor, indices) -> Tensor:
    """Select ``a.flat[indices]``; the adjoint scatter-adds back.

    ``indices`` is any integer ndarray; the result has its shape. Duplicate
    indices are allowed, and their adjoints accumulate (sum conservation).
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather: indices must be integers")
    flat = a.value.reshape(-1)
    if idx.size and (idx.min() < -flat.size or idx.max() >= flat.size):
        raise IndexError(f"gather: index out of range for size {flat.size}")
    out = flat[idx.reshape(-1)].reshape(idx.shape)
    nonneg = np.where(idx < 0, idx + flat.size, idx).reshape(-1)

    def vjp(g):
        acc = np.bincount(nonneg, weights=g.reshape(-1), minlength=flat.size)
        return (acc.reshape(a.value.shape),)

    return Tensor(out, parents=(a,), vjp=vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return Tensor(a.value.reshape(shape), parents=(a,), vjp=vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor(np.ascontiguousarray(a.value.transpose(axes)), parents=(a,), vjp=vjp)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(tensors)
    sizes = [t.value.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(grads)

    return Tensor(np.concatenate([t.value for t in parts], axis=axis), parents=parts, vjp=vjp)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes of a 4-d tensor."""
    if a.value.ndim != 4:
        raise ShapeError(f"pad2d: expected 4-d input, got shape {a.value.shape}")
    if pad == 0:
        return a
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    out = np.pad(a.value, width)

    def vjp(g):
        return (np.ascontiguousarray(g[:, :, pad:-pad, pad:-pad]),)

    return Tensor(out, parents=(a,), vjp=vjp)


# ---------------------------------------------------------------------------
# Backward pass

def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate adjoints from a scalar root; return parameter gradients.

    The traversal order is a fixed function of the graph, so repeated calls
    produce bitwise-identical gradients. Prior ``grad`` buffers are cleared
    first.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    params: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.requires_grad:
            params[node] = node.grad
        if node._vjp is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if not parent.needs_grad:
                continue
            if g.shape != parent.value.shape:
                raise ShapeError(
                    f"adjoint shape {g.shape} does not match value shape {parent.value.shape}"
                )
            # Accumulation always rebinds (never in-place), so views are safe.
            parent.grad = g if parent.grad is None else parent.grad + g
    return params
