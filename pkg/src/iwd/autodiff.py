"""Reverse-mode automatic differentiation over flat float64 arrays.

The engine builds a fresh expression graph per evaluation. Backward passes
construct their vector-Jacobian products out of the same primitive ops, so a
gradient is itself a differentiable graph node; Hessian-vector products fall
out of a second backward pass over ``<grad(f), v>`` with ``v`` held constant.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError


class Tensor:
    """A node in the expression graph wrapping a float64 ndarray.

    ``parents`` is a tuple of ``(input_node, vjp)`` pairs where ``vjp`` maps
    the upstream gradient Tensor to this input's gradient Tensor. Nodes are
    immutable after construction; ``data`` must never be written to.
    """

    __slots__ = ("data", "parents", "op", "requires_grad")

    def __init__(self, data, parents=(), op="leaf", requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.requires_grad = bool(
            requires_grad or any(p.requires_grad for p, _ in parents)
        )
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values produced by op '{op}'")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __pow__(self, exponent):
        return pow_(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def leaf(x) -> Tensor:
    """A differentiation root; gradients are collected with respect to these."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data + b.data,
        ((a, lambda g: _sum_to(g, a.shape)), (b, lambda g: _sum_to(g, b.shape))),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, ((a, lambda g: neg(g)),), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data * b.data,
        (
            (a, lambda g: _sum_to(mul(g, b), a.shape)),
            (b, lambda g: _sum_to(mul(g, a), b.shape)),
        ),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.data / b.data,
        (
            (a, lambda g: _sum_to(div(g, b), a.shape)),
            (b, lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)),
        ),
        "div",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    return Tensor(
        a.data @ b.data,
        (
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T, ((a, lambda g: transpose(g)),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor(
        a.data.reshape(shape), ((a, lambda g: reshape(g, a.shape)),), "reshape"
    )


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        kept = list(a.shape)
        for ax in axes:
            kept[ax] = 1
        if g.shape != tuple(kept):
            g = reshape(g, kept)
        return broadcast_to(g, a.shape)

    return Tensor(a.data.sum(axis=axes or None, keepdims=keepdims), ((a, vjp),), "sum")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return Tensor(out, ((a, lambda g: _sum_to(g, a.shape)),), "broadcast")


def exp(a: Tensor) -> Tensor:
    holder = []
    with np.errstate(over="ignore"):
        out = Tensor(np.exp(a.data), ((a, lambda g: mul(g, holder[0])),), "exp")
    holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        return Tensor(np.log(a.data), ((a, lambda g: mul(g, pow_(a, -1.0))),), "log")


def pow_(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return Tensor(
        np.power(a.data, exponent),
        ((a, lambda g: mul(g, mul(constant(exponent), pow_(a, exponent - 1.0)))),),
        "pow",
    )


def sqrt(a: Tensor) -> Tensor:
    return pow_(a, 0.5)


def relu(a: Tensor) -> Tensor:
    mask = constant((a.data > 0).astype(np.float64))
    return Tensor(a.data * mask.data, ((a, lambda g: mul(g, mask)),), "relu")


def take_along1(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row: out[i, j] = a[i, idx[i, j]]."""
    idx = np.asarray(idx, dtype=np.intp)
    return Tensor(
        np.take_along_axis(a.data, idx, axis=1),
        ((a, lambda g: scatter_along1(g, idx, a.shape)),),
        "take_along1",
    )


def scatter_along1(src: Tensor, idx: np.ndarray, shape) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = tuple(shape)
    acc = np.zeros(shape)
    rows = np.arange(shape[0])[:, None]
    np.add.at(acc, (rows, idx), src.data)
    return Tensor(
        acc, ((src, lambda g: take_along1(g, idx)),), "scatter_along1"
    )


def take1d(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather from a 1-D tensor with an arbitrary-shaped index array."""
    idx = np.asarray(idx, dtype=np.intp)
    return Tensor(
        a.data[idx], ((a, lambda g: scatter1d(g, idx, a.shape[0])),), "take1d"
    )


def scatter1d(src: Tensor, idx: np.ndarray, length: int) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    acc = np.zeros(length)
    np.add.at(acc, idx.ravel(), src.data.ravel())
    return Tensor(acc, ((src, lambda g: take1d(g, idx)),), "scatter1d")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    return Tensor(
        a.data[idx], ((a, lambda g: scatter_rows(g, idx, a.shape)),), "take_rows"
    )


def scatter_rows(src: Tensor, idx: np.ndarray, shape) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    acc = np.zeros(tuple(shape))
    np.add.at(acc, idx, src.data)
    return Tensor(acc, ((src, lambda g: take_rows(g, idx)),), "scatter_rows")


def slice1d(a: Tensor, start: int, stop: int) -> Tensor:
    return Tensor(
        a.data[start:stop],
        ((a, lambda g: embed1d(g, start, a.shape[0])),),
        "slice1d",
    )


def embed1d(src: Tensor, start: int, length: int) -> Tensor:
    acc = np.zeros(length)
    acc[start : start + src.shape[0]] = src.data
    return Tensor(
        acc,
        ((src, lambda g: slice1d(g, start, start + src.shape[0])),),
        "embed1d",
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(mul(a, b))


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
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(out: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of scalar ``out`` with respect to each node in ``wrt``.

    The returned gradients are graph nodes themselves, so they can be fed
    back into further differentiation (double backward).
    """
    if out.ndim != 0:
        raise ContractError("backward expects a 0-d scalar output")
    grads: dict[int, Tensor] = {id(out): constant(1.0)}
    if out.requires_grad:
        for node in reversed(_toposort(out)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    return [
        grads.get(id(w)) if grads.get(id(w)) is not None else constant(np.zeros(w.shape))
        for w in wrt
    ]


# A scalar function is any callable building a 0-d Tensor from a parameter
# Tensor; the data it closes over is part of its identity.
ScalarFunction = Callable[[Tensor], Tensor]


def _as_param(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size == 0:
        raise ContractError("parameter vector must be 1-D and non-empty")
    return theta


def value(f: ScalarFunction, theta) -> float:
    """Evaluate ``f`` at ``theta``."""
    out = f(constant(_as_param(theta)))
    return out.item()


def grad(f: ScalarFunction, theta) -> np.ndarray:
    """Gradient of ``f`` at ``theta``."""
    t = leaf(_as_param(theta))
    (g,) = backward(f(t), [t])
    return g.data.copy()


def hvp(f: ScalarFunction, theta, v) -> np.ndarray:
    """Hessian-vector product ``H(theta) @ v`` via double backward."""
    theta = _as_param(theta)
    v = _as_param(v)
    if v.shape != theta.shape:
        raise ContractError("hvp direction must match parameter dimension")
    t = leaf(theta)
    (g,) = backward(f(t), [t])
    s = dot(g, constant(v))
    (h,) = backward(s, [t])
    return h.data.copy()


def fd_grad(f: ScalarFunction, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate; test oracle only."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    theta = _as_param(theta)
    out = np.empty_like(theta)
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = h
        out[i] = (value(f, theta + bump) - value(f, theta - bump)) / (2.0 * h)
    return out
