"""Small reverse-mode differentiation engine over dense float64 arrays.

Graphs are built eagerly: every op returns a :class:`Node` holding its value
and a closure that maps the output gradient to the parents' gradients.
:func:`backward` walks the tape in reverse topological order.

Only bias-add broadcasting is supported (a 1-D right operand matching the
last axis of the left one); everything else must match shapes exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVelocity, DimensionError, NonFiniteError

NORM_FLOOR = 1e-12


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad", "name", "requires_grad", "op")

    def __init__(self, value, parents=(), backward_fn=None, name=None, requires_grad=None, op="leaf"):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by {op!r}")
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    def numpy(self):
        return self.value.copy()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(as_node(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def parameter(value, name=None) -> Node:
    """Trainable leaf."""
    return Node(np.array(value, dtype=np.float64), name=name, requires_grad=True)


def constant(value, name=None) -> Node:
    return Node(np.array(value, dtype=np.float64), name=name, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward_fn, op):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op, requires_grad=False)
    return Node(value, parents, backward_fn, op=op)


def _check_same(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_bias(a: Node, b: Node) -> bool:
    return b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _reduce_bias(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if _is_bias(a, b):
        return _make(a.value + b.value, (a, b), lambda g: (g, _reduce_bias(g)), "add")
    _check_same(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if _is_bias(a, b):
        return _make(a.value - b.value, (a, b), lambda g: (g, -_reduce_bias(g)), "sub")
    _check_same(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float) -> Node:
    a = as_node(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if b.value.ndim != 2 or a.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward, "matmul")


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Node:
    x = as_node(x)
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def square(x) -> Node:
    x = as_node(x)
    xv = x.value
    return _make(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def sum_(x, axis=None) -> Node:
    x = as_node(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.value.sum(axis=axis), (x,), backward, "sum")


def mean(x, axis=None) -> Node:
    x = as_node(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def mse(x, y) -> Node:
    """Mean of squared differences over all entries."""
    x, y = as_node(x), as_node(y)
    _check_same(x, y, "mse")
    return mean(square(sub(x, y)))


def l2norm(x, axis=None) -> Node:
    x = as_node(x)
    xv = x.value
    n = np.sqrt(np.sum(xv * xv, axis=axis))

    def backward(g):
        if np.any(n <= 0.0):
            raise DegenerateVelocity("l2norm gradient undefined at zero vector")
        if axis is None:
            return (g * xv / n,)
        return (np.expand_dims(g / n, axis) * xv,)

    return _make(n, (x,), backward, "l2norm")


def cosine(u, v, axis=None) -> Node:
    """Cosine similarity; ``axis=None`` flattens, otherwise reduces along ``axis``.

    Raises DegenerateVelocity when any norm falls below 1e-12 rather than
    clamping it.
    """
    u, v = as_node(u), as_node(v)
    _check_same(u, v, "cosine")
    uv, vv = u.value, v.value
    nu = np.sqrt(np.sum(uv * uv, axis=axis, keepdims=axis is not None))
    nv = np.sqrt(np.sum(vv * vv, axis=axis, keepdims=axis is not None))
    if np.any(nu < NORM_FLOOR) or np.any(nv < NORM_FLOOR):
        raise DegenerateVelocity("cosine of a (near) zero-norm vector")
    dot = np.sum(uv * vv, axis=axis, keepdims=axis is not None)
    c = dot / (nu * nv)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        gu = g * (vv / (nu * nv) - c * uv / (nu * nu))
        gv = g * (uv / (nu * nv) - c * vv / (nv * nv))
        return gu, gv

    out = c if axis is None else np.squeeze(c, axis=axis)
    return _make(out, (u, v), backward, "cosine")


def concat(nodes: Sequence, axis=-1) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise DimensionError("concat of an empty list")
    ax = axis % nodes[0].value.ndim
    for n in nodes[1:]:
        if n.value.ndim != nodes[0].value.ndim or any(
            s != t for i, (s, t) in enumerate(zip(n.shape, nodes[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[m.shape for m in nodes]}")
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(nodes))
        )

    return _make(np.concatenate([n.value for n in nodes], axis=ax), nodes, backward, "concat")


def stack(nodes: Sequence, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    expanded = [reshape(n, n.shape[:axis] + (1,) + n.shape[axis:]) for n in nodes]
    return concat(expanded, axis=axis)


def slice_(x, index) -> Node:
    x = as_node(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.value[index], (x,), backward, "slice")


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {old} -> {shape}: {exc}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def stop_gradient(x) -> Node:
    """Pass the value through with no parents, so nothing flows back."""
    x = as_node(x)
    return Node(x.value.copy(), op="stop_gradient", requires_grad=False)


def _topological(root: Node):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable trainable leaf.

    Returns a mapping from leaf node to its gradient array. Leaves reachable
    only through :func:`stop_gradient` do not appear (their gradient is zero).
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    grads = {id(root): np.ones_like(root.value)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for leaf, g in leaves.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {leaf!r}")
    return leaves


def grad(fn: Callable[..., Node], *arrays) -> list:
    """Gradients of scalar ``fn(*nodes)`` with respect to each input array."""
    nodes = [parameter(a) for a in arrays]
    backward(fn(*nodes))
    return [np.zeros_like(n.value) if n.grad is None else n.grad for n in nodes]


def zero_grad(params: Iterable[Node]):
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr=None):
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads):
        raise DimensionError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Adam over parameter groups, each group with its own learning rate.

    ``groups`` maps a group name to ``(list_of_nodes, lr)``.
    """

    def __init__(self, groups: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = {
            name: (list(nodes), AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps))
            for name, (nodes, lr) in groups.items()
        }

    def step(self):
        for nodes, state in self.groups.values():
            grads = [np.zeros_like(n.value) if n.grad is None else n.grad for n in nodes]
            adam_step([n.value for n in nodes], grads, state)

    def zero_grad(self):
        for nodes, _ in self.groups.values():
            zero_grad(nodes)
