"""Dense-tensor reverse-mode automatic differentiation.

Every node stores its value, its adjoint (``grad``), the nodes it was computed
from and a closure mapping the output adjoint to one contribution per parent.
Broadcasting is restricted to three cases so every backward rule stays easy
to audit:

* identical shapes,
* a scalar (shape ``()``) against anything,
* leading-dimension batch expansion: one operand's shape is a suffix of the other's,
* re-expansion of a ``keepdims`` reduction against its source (same rank, size-1 axes).

Non-smooth primitives (relu, abs, clamp, max-reduce and the lookup in the model)
log their branch pattern while :func:`record_branches` is active, which the
finite-difference checker uses to exclude perturbations that cross a kink.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.errors import DomainError, ShapeError

Array = np.ndarray
BackwardRule = Callable[[Array], Tuple[Optional[Array], ...]]
Operand = Union["Node", float, int]

_branch_log: ContextVar[Optional[List[Tuple[str, bytes]]]] = ContextVar("branch_log", default=None)


def as_tensor(data, dtype=None) -> Array:
    """Copy ``data`` into a read-only array of the configured precision."""
    arr = np.array(data, dtype=dtype or settings.FLOAT_DTYPE, copy=True)
    arr.setflags(write=False)
    return arr


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "op", "requires_grad", "name")

    def __init__(
        self,
        value: Array,
        parents: Sequence["Node"] = (),
        backward_rule: Optional[BackwardRule] = None,
        op: str = "leaf",
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        value = np.asarray(value)
        value.setflags(write=False)
        self.value = value
        self.grad: Optional[Array] = None
        self.parents: Tuple[Node, ...] = tuple(parents)
        self.backward_rule = backward_rule
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar; every operator routes through a primitive below
    def __add__(self, other: Operand) -> "Node":
        return add(self, _lift(other, self))

    def __radd__(self, other: Operand) -> "Node":
        return add(_lift(other, self), self)

    def __sub__(self, other: Operand) -> "Node":
        return sub(self, _lift(other, self))

    def __rsub__(self, other: Operand) -> "Node":
        return sub(_lift(other, self), self)

    def __mul__(self, other: Operand) -> "Node":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Node":
        return self.__mul__(other)

    def __truediv__(self, other: Operand) -> "Node":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __getitem__(self, index) -> "Node":
        return slice_(self, index)


def constant(data, dtype=None) -> Node:
    return Node(as_tensor(data, dtype), op="const")


def parameter(data, name: Optional[str] = None, dtype=None) -> Node:
    return Node(as_tensor(data, dtype), op="param", requires_grad=True, name=name)


def _lift(other: Operand, like: Node) -> Node:
    if isinstance(other, Node):
        return other
    return Node(np.asarray(other, dtype=like.value.dtype), op="const")


def _make(value: Array, parents: Sequence[Node], rule: BackwardRule, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, rule, op)
    return Node(value, op=op)


def record_branch(op: str, pattern: Array) -> None:
    log = _branch_log.get()
    if log is not None:
        log.append((op, np.ascontiguousarray(pattern).tobytes()))


@contextmanager
def record_branches() -> Iterator[List[Tuple[str, bytes]]]:
    """Collect the branch pattern of every non-smooth primitive evaluated inside the block."""
    log: List[Tuple[str, bytes]] = []
    token = _branch_log.set(log)
    try:
        yield log
    finally:
        _branch_log.reset(token)

# --- Broadcasting ---

def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(a) == len(b):
        if all(x == y or y == 1 for x, y in zip(a, b)):
            return a
        if all(x == y or x == 1 for x, y in zip(a, b)):
            return b
    raise ShapeError(op, a, b)


def _unbroadcast(g: Array, shape: Tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)

# --- Elementwise binary primitives ---

def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g: Array):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.value + b.value, (a, b), rule, "add")


def broadcast_add(a: Node, b: Node) -> Node:
    """Bias-style addition: ``b``'s shape must be a trailing suffix of ``a``'s."""
    if len(b.shape) > len(a.shape) or a.shape[len(a.shape) - len(b.shape):] != b.shape:
        raise ShapeError("broadcast_add", a.shape, b.shape)
    return add(a, b)


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g: Array):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.value - b.value, (a, b), rule, "sub")


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value

    def rule(g: Array):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), rule, "mul")


def div(a: Node, b: Node) -> Node:
    _broadcast_shape("div", a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv

    def rule(g: Array):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _make(out, (a, b), rule, "div")


def scale(a: Node, c: float) -> Node:
    def rule(g: Array):
        return (g * c,)

    return _make(a.value * c, (a,), rule, "scale")

# --- Elementwise unary primitives ---

def relu(a: Node) -> Node:
    """Rectifier. The subgradient at exactly 0 is 0."""
    mask = a.value > 0
    record_branch("relu", mask)

    def rule(g: Array):
        return (g * mask,)

    return _make(np.where(mask, a.value, 0.0).astype(a.value.dtype), (a,), rule, "relu")


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def rule(g: Array):
        return (g * out,)

    return _make(out, (a,), rule, "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        bad = int(np.argmin(a.value))
        raise DomainError(
            "log of non-positive input; clamp with clamp_min(x, eps) first",
            op="log",
            min_value=float(a.value.reshape(-1)[bad]),
        )
    av = a.value

    def rule(g: Array):
        return (g / av,)

    return _make(np.log(av), (a,), rule, "log")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)

    def rule(g: Array):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), rule, "tanh")


def square(a: Node) -> Node:
    av = a.value

    def rule(g: Array):
        return (2.0 * g * av,)

    return _make(av * av, (a,), rule, "square")


def abs_(a: Node) -> Node:
    sign = np.sign(a.value)
    record_branch("abs", sign.astype(np.int8))

    def rule(g: Array):
        return (g * sign,)

    return _make(np.abs(a.value), (a,), rule, "abs")


def clamp_min(a: Node, floor: float) -> Node:
    """max(a, floor); gradient passes where the input is at or above the floor."""
    mask = a.value >= floor
    record_branch("clamp_min", mask)

    def rule(g: Array):
        return (g * mask,)

    return _make(np.where(mask, a.value, floor).astype(a.value.dtype), (a,), rule, "clamp_min")

# --- Reductions ---

def _norm_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def rule(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), rule, "sum")


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max_reduce(a: Node, axis: int = -1, keepdims: bool = False) -> Node:
    """Maximum along one axis; the adjoint flows to the first maximiser."""
    axis = axis % a.ndim
    idx = np.argmax(a.value, axis=axis)
    record_branch("max_reduce", idx)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis)
    shape = a.shape

    def rule(g: Array):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=gk.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), rule, "max_reduce")


def min_reduce(a: Node, axis: int = -1, keepdims: bool = False) -> Node:
    return scale(max_reduce(scale(a, -1.0), axis=axis, keepdims=keepdims), -1.0)

# --- Linear algebra and shape plumbing ---

def matmul(a: Node, b: Node) -> Node:
    """(..., n, k) @ (k, m), (n, k) @ (..., k, m) or equal leading dimensions."""
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    if a.ndim > 2 and b.ndim > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError("matmul", sa, sb)
    av, bv = a.value, b.value

    def rule(g: Array):
        if b.ndim == 2:
            ga = g @ bv.T
            gb = av.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        elif a.ndim == 2:
            ga = (g @ np.swapaxes(bv, -1, -2)).reshape(-1, sa[0], sa[1]).sum(axis=0)
            gb = av.T @ g
        else:
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _make(av @ bv, (a, b), rule, "matmul")


def transpose(a: Node, axes: Optional[Sequence[int]] = None) -> Node:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def rule(g: Array):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.value, axes), (a,), rule, "transpose")


def swap_last(a: Node) -> Node:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    src = a.shape
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape))

    def rule(g: Array):
        return (g.reshape(src),)

    return _make(out, (a,), rule, "reshape")


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    ref = nodes[0].shape
    axis = axis % len(ref)
    for n in nodes[1:]:
        if len(n.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, n.shape)) if i != axis):
            raise ShapeError("concat", ref, n.shape)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def rule(g: Array):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), rule, "concat")


def slice_(a: Node, index) -> Node:
    shape = a.shape
    out = a.value[index]

    def rule(g: Array):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), rule, "slice")

# --- Reverse sweep ---

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node, retain_graph: bool = False) -> Dict[Node, Array]:
    """Propagate d(root)/d(node) to every reachable differentiable leaf.

    Returns a map from leaf node to its adjoint. A root with no differentiable
    ancestors yields an empty map; leaves the root does not reach are absent
    (callers treat them as zero).
    """
    if root.value.size != 1:
        raise ShapeError("backward", root.shape, (), detail=f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node.grad
        if g is None or node.backward_rule is None:
            continue
        for parent, contrib in zip(node.parents, node.backward_rule(g)):
            if contrib is None or not parent.requires_grad:
                continue
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
        if not retain_graph:
            node.grad = None
    return {
        node: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for node in order
        if node.is_leaf
    }
