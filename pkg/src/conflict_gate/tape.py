"""Reverse-mode automatic differentiation on an append-only tape.

Every node holds a numpy value (0-d for scalars) together with the local
partial derivatives of its op evaluated at the recorded inputs. Gradients are
obtained with a single reverse sweep from a scalar root.

    >>> tape = Tape()
    >>> x = tape.var(3.0)
    >>> y = x * x
    >>> tape.backward(y)
    array([6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .exceptions import DomainError

__all__ = ["Node", "Tape", "TapeNode", "ELEMENTARY_OPS", "elementary", "sigmoid"]

# |denominator| at or below this is treated as a division by zero
DIV_GUARD = 1e-300

ELEMENTARY_OPS = (
    "add", "sub", "mul", "div", "neg", "square", "tanh", "sigmoid",
    "relu", "ln", "exp", "max0", "softplus",
)


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return _as_value(np.where(x >= 0, 1.0, e) / (1.0 + e))


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    return v[()] if v.ndim == 0 else v


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(slots=True)
class TapeNode:
    value: Any
    op: str
    inputs: tuple[int, ...] = ()
    partials: tuple = ()
    meta: Any = None


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    leaves: list[int] = field(default_factory=list)

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: TapeNode) -> "Node":
        self.nodes.append(node)
        return Node(self, len(self.nodes) - 1)

    def var(self, value) -> "Node":
        """Register an independent variable (scalar or array)."""
        handle = self._push(TapeNode(_as_value(value).copy() if np.ndim(value) else _as_value(value), "leaf"))
        self.leaves.append(handle.index)
        return handle

    def const(self, value) -> "Node":
        return self._push(TapeNode(_as_value(value), "const"))

    def lift(self, x) -> "Node":
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def backward(self, root: "Node") -> np.ndarray:
        """Gradient of a scalar ``root`` w.r.t. every leaf, flattened in leaf order."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if np.ndim(root.value) != 0:
            raise ValueError("backward requires a scalar root")
        adj: list[Any] = [None] * (root.index + 1)
        adj[root.index] = np.ones(())
        nodes = self.nodes
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if node.op in ("leaf", "const"):
                continue
            for j, contrib in zip(node.inputs, _vjp(node, g, nodes)):
                adj[j] = contrib if adj[j] is None else adj[j] + contrib
        parts = []
        for j in self.leaves:
            shape = np.shape(nodes[j].value)
            if j <= root.index and adj[j] is not None:
                parts.append(np.broadcast_to(adj[j], shape).ravel())
            else:
                parts.append(np.zeros(int(np.prod(shape, dtype=int))))
        return np.concatenate(parts) if parts else np.zeros(0)


def _vjp(node: TapeNode, g, nodes: list[TapeNode]):
    op = node.op
    if op == "matmul":
        b_val, a_val = node.partials
        a_shape, b_shape = (np.shape(nodes[k].value) for k in node.inputs)
        return (_unbroadcast(g @ np.swapaxes(b_val, -1, -2), a_shape),
                _unbroadcast(np.swapaxes(a_val, -1, -2) @ g, b_shape))
    if op == "sum":
        in_shape, axis = node.meta
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)
    if op == "getitem":
        in_shape, key = node.meta
        out = np.zeros(in_shape)
        if _is_basic(key):
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)
    if op == "reshape":
        return (np.reshape(g, node.meta),)
    # elementwise: partials are arrays/scalars broadcastable against g
    return tuple(
        _unbroadcast(np.asarray(g * p), np.shape(nodes[k].value))
        for k, p in zip(node.inputs, node.partials)
    )


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis for k in keys)


def elementary(tape: Tape, op: str, *args) -> "Node":
    """Record one elementwise op. Binary ops broadcast numpy-style."""
    if op not in ELEMENTARY_OPS:
        raise ValueError(f"unknown op {op!r}")
    nodes = [tape.lift(a) for a in args]
    vals = [n.value for n in nodes]
    idx = tuple(n.index for n in nodes)
    if op in ("add", "sub", "mul", "div"):
        if len(nodes) != 2:
            raise ValueError(f"{op} takes two arguments")
        a, b = vals
        if op == "add":
            return tape._push(TapeNode(_as_value(a + b), op, idx, (1.0, 1.0)))
        if op == "sub":
            return tape._push(TapeNode(_as_value(a - b), op, idx, (1.0, -1.0)))
        if op == "mul":
            return tape._push(TapeNode(_as_value(a * b), op, idx, (b, a)))
        if np.any(np.abs(b) <= DIV_GUARD):
            raise DomainError("division by a value indistinguishable from zero")
        inv = 1.0 / b
        return tape._push(TapeNode(_as_value(a * inv), op, idx, (inv, -a * inv * inv)))

    if len(nodes) != 1:
        raise ValueError(f"{op} takes one argument")
    (x,) = vals
    if op == "neg":
        out, d = -x, -1.0
    elif op == "square":
        out, d = x * x, 2.0 * x
    elif op == "tanh":
        out = np.tanh(x)
        d = 1.0 - out * out
    elif op == "sigmoid":
        out = sigmoid(x)
        d = out * (1.0 - out)
    elif op in ("relu", "max0"):
        # derivative at exactly 0 is taken as 0
        out = np.maximum(x, 0.0)
        d = (np.asarray(x) > 0).astype(float)
    elif op == "ln":
        if np.any(np.asarray(x) <= 0):
            raise DomainError("ln of a non-positive value")
        out, d = np.log(x), 1.0 / x
    elif op == "exp":
        out = np.exp(x)
        d = out
    else:  # softplus
        out = np.logaddexp(0.0, x)
        d = sigmoid(x)
    return tape._push(TapeNode(_as_value(out), op, idx, (_as_value(d),)))


class Node:
    """Handle to a node on a :class:`Tape`; supports arithmetic operators."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Node(#{self.index}, op={self.op!r}, value={self.value!r})"

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def op(self) -> str:
        return self.tape.nodes[self.index].op

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    def __add__(self, o):
        return elementary(self.tape, "add", self, o)

    def __radd__(self, o):
        return elementary(self.tape, "add", o, self)

    def __sub__(self, o):
        return elementary(self.tape, "sub", self, o)

    def __rsub__(self, o):
        return elementary(self.tape, "sub", o, self)

    def __mul__(self, o):
        return elementary(self.tape, "mul", self, o)

    def __rmul__(self, o):
        return elementary(self.tape, "mul", o, self)

    def __truediv__(self, o):
        return elementary(self.tape, "div", self, o)

    def __rtruediv__(self, o):
        return elementary(self.tape, "div", o, self)

    def __neg__(self):
        return elementary(self.tape, "neg", self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(self.tape.lift(o), self)

    def __getitem__(self, key):
        return getitem(self, key)

    def square(self):
        return elementary(self.tape, "square", self)

    def tanh(self):
        return elementary(self.tape, "tanh", self)

    def sigmoid(self):
        return elementary(self.tape, "sigmoid", self)

    def relu(self):
        return elementary(self.tape, "relu", self)

    def exp(self):
        return elementary(self.tape, "exp", self)

    def ln(self):
        return elementary(self.tape, "ln", self)

    def softplus(self):
        return elementary(self.tape, "softplus", self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        n = np.size(self.value) if axis is None else np.shape(self.value)[axis]
        return reduce_sum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def matmul(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    out = np.asarray(a.value) @ np.asarray(b.value)
    return tape._push(TapeNode(_as_value(out), "matmul", (a.index, b.index), (b.value, a.value)))


def reduce_sum(x: Node, axis: int | None = None) -> Node:
    val = np.asarray(x.value)
    return x.tape._push(TapeNode(_as_value(val.sum(axis=axis)), "sum", (x.index,), (), (val.shape, axis)))


def getitem(x: Node, key) -> Node:
    val = np.asarray(x.value)
    return x.tape._push(TapeNode(_as_value(val[key]), "getitem", (x.index,), (), (val.shape, key)))


def reshape(x: Node, shape: Sequence[int] | int) -> Node:
    val = np.asarray(x.value)
    return x.tape._push(TapeNode(val.reshape(shape), "reshape", (x.index,), (), val.shape))
