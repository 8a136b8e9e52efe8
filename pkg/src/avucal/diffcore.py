"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only what a variational MLP and the calibration losses need: dense matmul,
elementwise arithmetic, a handful of activations, row-wise softmax and
reductions.  Every op checks its output for NaN/Inf and raises
:class:`NumericalError` instead of letting non-finite values propagate.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Node", "NumericalError", "ShapeError",
    "parameter", "constant", "backward", "zero_grad",
    "matmul", "transpose", "add", "sub", "mul", "div", "neg",
    "scale", "mul_scalar", "add_scalar", "square",
    "relu", "tanh", "softplus", "exp", "log",
    "softmax", "log_softmax", "sum", "mean", "max",
    "pick", "index", "concat",
]


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


Number = Union[int, float]
_GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph.

    ``grad`` stays ``None`` until a backward pass reaches the node.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_grad_fn", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), grad_fn: Optional[_GradFn] = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on node of shape {self.value.shape}")
        return float(self.value.reshape(()))

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Node) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value) -> Node:
    """Leaf node that collects gradients."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, op="param")


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False, op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, parents: Sequence[Node], grad_fn: _GradFn, op: str) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite output from {op}")
    return Node(value, parents, grad_fn, op=op)


def _topo_order(root: Node) -> list:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Gradients add onto whatever is already stored, so two passes without
    :func:`zero_grad` leave exactly twice the single-pass gradient.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    local = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = local.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg
    for node in order:
        g = local.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = None


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value

    def grad_fn(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), grad_fn, "matmul")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose expects a 2-D node")
    return _make(a.value.T, (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    """Elementwise sum; also accepts a (n, m) + (m,) row-wise bias add."""
    a, b = _as_node(a), _as_node(b)
    if a.shape == b.shape:
        return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    raise ShapeError(f"add shapes {a.shape} and {b.shape} do not conform")


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape} do not conform")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"div shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * av / (bv * bv)), "div")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a: Node, c: Number) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def mul_scalar(a: Node, c: Node) -> Node:
    """Multiply every entry of ``a`` by the 0-d node ``c``."""
    if c.value.size != 1:
        raise ShapeError("mul_scalar expects a single-element multiplier")
    av, cv = a.value, c.value.reshape(())
    return _make(av * cv, (a, c), lambda g: (g * cv, np.sum(g * av).reshape(c.shape)), "mul_scalar")


def add_scalar(a: Node, c: Number) -> Node:
    return _make(a.value + float(c), (a,), lambda g: (g,), "add_scalar")


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Node) -> Node:
    av = a.value
    return _make(_softplus(av), (a,), lambda g: (g * _sigmoid(av),), "softplus")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Node, eps: Optional[float] = None) -> Node:
    """Natural log.  Without ``eps`` any input <= 0 is an error."""
    av = a.value
    if eps is None:
        if np.any(av <= 0):
            raise NumericalError("log of non-positive value")
        shifted = av
    else:
        shifted = av + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(shifted)
    return _make(out, (a,), lambda g: (g / shifted,), "log")


# ---------------------------------------------------------------- row-wise

def softmax(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("softmax expects a batch x classes node")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), grad_fn, "softmax")


def log_softmax(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("log_softmax expects a batch x classes node")
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), grad_fn, "log_softmax")


# ---------------------------------------------------------------- reductions

def sum(a: Node, axis: Optional[int] = None) -> Node:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.value.sum(axis=axis)), (a,), grad_fn, "sum")


def mean(a: Node, axis: Optional[int] = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum(a, axis), 1.0 / n)


def max(a: Node, axis: int = 1) -> Node:  # noqa: A001 - mirrors numpy
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    av = a.value
    idx = np.argmax(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), grad_fn, "max")


# ---------------------------------------------------------------- gathers

def pick(a: Node, cols) -> Node:
    """Row-wise gather: ``out[i] = a[i, cols[i]]``."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.value.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError("pick expects a 2-D node and one column per row")
    if np.any((cols < 0) | (cols >= a.shape[1])):
        raise IndexError("column index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _make(a.value[rows, cols], (a,), grad_fn, "pick")


def index(a: Node, idx) -> Node:
    """Select entries of a 1-D node (integer or boolean index)."""
    if a.value.ndim != 1:
        raise ShapeError("index expects a 1-D node")
    idx = np.asarray(idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    n = a.shape[0]

    def grad_fn(g):
        full = np.zeros(n)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), grad_fn, "index")


def concat(nodes: Sequence[Node]) -> Node:
    """Concatenate 0-d or 1-d nodes into one 1-D node."""
    vals = [np.atleast_1d(n.value) for n in nodes]
    sizes = [v.shape[0] for v in vals]
    offsets = np.cumsum([0] + sizes)
    shapes = [n.shape for n in nodes]

    def grad_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]].reshape(shapes[i]) for i in range(len(nodes)))

    return _make(np.concatenate(vals), tuple(nodes), grad_fn, "concat")
