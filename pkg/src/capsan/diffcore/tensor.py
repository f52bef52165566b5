"""Dense float64 tensors with reverse-mode differentiation.

Every operation records a backward closure on a tape; ``backward`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into the ``grad`` buffer of leaf tensors with ``requires_grad``.
All values are checked finite after every primitive; NaN/Inf raises
:class:`~capsan.errors.NonFiniteValue` immediately instead of propagating.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NonFiniteValue, NonScalarLoss, ShapeMismatch

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(data: np.ndarray, context: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"non-finite values produced by {context}")


class Tensor:
    """n-d float64 array with an optional gradient buffer.

    ``data`` is always a C-contiguous float64 ndarray of ndim >= 1;
    python scalars and 0-d reductions become shape-(1,) arrays. ``grad``
    is filled by :func:`backward` for leaf tensors created with
    ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    # keep numpy from absorbing us in mixed expressions; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    context: str = "op",
) -> Tensor:
    """Build a graph node. Ops defined outside this module use this hook."""
    data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    _check_finite(data, context)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- reverse pass -----------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents appear before children


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = flowing.get(id(parent))
            flowing[id(parent)] = pg if prev is None else prev + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- broadcasting helper ----------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise primitives ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return make_op(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return make_op(
        a.data**p,
        (a,),
        lambda g: (g * p * a.data ** (p - 1.0),),
        "power",
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sqrt_guarded(a, floor: float = 1e-12) -> Tensor:
    """sqrt that is exact at 0; the backward denominator is clamped to
    ``floor`` so norms of zero vectors do not blow up."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(
        out, (a,), lambda g: (g * 0.5 / np.maximum(out, floor),), "sqrt_guarded"
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable two-branch logistic
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """max(x, slope*x) for slope in [0, 1)."""
    a = as_tensor(a)
    slope = float(slope)
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return make_op(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# -- reductions / structure ---------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    # scalars are promoted to shape (1,) at op boundaries, so rebuild the
    # kept-dims shape from scratch instead of trusting g's current shape
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return np.broadcast_to(g.reshape(kept), shape).copy()


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return make_op(
        out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum"
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return make_op(
        out,
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
        "mean",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    return make_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return make_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return make_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back, "concat")


def embedding(table, ids) -> Tensor:
    """Row gather ``table[ids]``; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeMismatch(f"embedding ids must be 1-d, got shape {ids.shape}")
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-d, got shape {table.shape}")

    def back(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return make_op(table.data[ids], (table,), back, "embedding")
