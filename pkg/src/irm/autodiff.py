"""Small reverse-mode differentiation engine over numpy arrays.

Graphs are rebuilt on every evaluation: each op returns a fresh :class:`Node`
holding its value and a closure mapping the upstream gradient to gradients of
its parents. Parameters are long-lived leaf nodes whose ``value`` is swapped
out by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "constant",
    "parameter",
    "as_node",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "broadcast_rows",
    "logsumexp",
    "backward",
    "Mlp",
    "AdamState",
    "adam_step",
]


class Node:
    """A value in a computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def constant(value) -> Node:
    return Node(value)


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents: tuple[Node, ...], backward_fn) -> Node:
    requires = any(p.requires_grad for p in parents)
    return Node(value, parents if requires else (), backward_fn if requires else None, requires)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Node:
    """Matrix product for 1-D and 2-D operands."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim > 2 or b.value.ndim > 2:
        raise ValueError("matmul supports only 1-D and 2-D operands")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward_fn(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward_fn)


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward_fn)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T, (a,), lambda g: (g.T,))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_rows(a, n: int) -> Node:
    """Repeat a 1-D node into an ``(n, len(a))`` matrix."""
    a = as_node(a)
    if a.value.ndim != 1:
        raise ValueError("broadcast_rows expects a 1-D node")
    out = np.broadcast_to(a.value, (n, a.shape[0])).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),))


def logsumexp(a, axis: int) -> Node:
    a = as_node(a)
    shift = a.value.max(axis=axis, keepdims=True)
    # the shift is treated as a constant; the result is still exact
    return add(log(sum(exp(sub(a, shift)), axis=axis)), np.squeeze(shift, axis=axis))


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Returns a map from every reachable leaf that requires a gradient to its
    gradient. The same arrays are also stored on ``node.grad``.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None or not node.requires_grad:
            continue
        if node.backward_fn is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return leaves


class Mlp:
    """Fully connected network with tanh hidden layers and a linear output."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(weights, biases)):
            w = np.asarray(w, dtype=np.float64)
            if w.ndim != 2 or np.shape(b) != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} incompatible with bias {np.shape(b)}")
            if k and w.shape[0] != np.shape(weights[k - 1])[1]:
                raise ValueError(f"layer {k} input {w.shape[0]} != previous output")
        self.params = [
            parameter(np.array(p, dtype=np.float64), name=f"{kind}{k}")
            for k, pair in enumerate(zip(weights, biases))
            for kind, p in zip(("W", "b"), pair)
        ]

    @classmethod
    def init(
        cls,
        input_dim: int,
        output_dim: int,
        hidden_dims: Sequence[int],
        rng: np.random.Generator,
        output_scale: float = 1.0,
    ) -> "Mlp":
        dims = [input_dim, *hidden_dims, output_dim]
        weights, biases = [], []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if k == len(dims) - 2:
                w = w * output_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, input_dim: int, output_dim: int, hidden_dims: Sequence[int] = ()) -> "Mlp":
        dims = [input_dim, *hidden_dims, output_dim]
        return cls(
            [np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])],
            [np.zeros(o) for o in dims[1:]],
        )

    @property
    def weights(self) -> list[np.ndarray]:
        return [p.value for p in self.params[0::2]]

    @property
    def biases(self) -> list[np.ndarray]:
        return [p.value for p in self.params[1::2]]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_dims(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    def _check_input(self, x) -> None:
        width = x.shape[-1] if x.ndim else 0
        if width != self.input_dim:
            raise ValueError(f"Mlp expects input width {self.input_dim}, got {width}")

    def forward(self, x) -> Node:
        """Differentiable forward pass (input 1-D or a batch of rows)."""
        h = as_node(x)
        self._check_input(h.value)
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            h = add(matmul(h, self.params[2 * k]), self.params[2 * k + 1])
            if k < n_layers - 1:
                h = tanh(h)
        return h

    def __call__(self, x) -> np.ndarray:
        """Plain numpy forward pass, no graph."""
        h = np.asarray(x, dtype=np.float64)
        self._check_input(h)
        weights, biases = self.weights, self.biases
        for k, (w, b) in enumerate(zip(weights, biases)):
            h = h @ w + b
            if k < len(weights) - 1:
                h = np.tanh(h)
        return h

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def set_values(self, values: Iterable[np.ndarray]) -> None:
        for p, v in zip(self.params, values, strict=True):
            p.value = v

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        layers = data["layers"]
        return cls(
            [np.array(layer["weight"], dtype=np.float64).reshape(len(layer["weight"]), -1) for layer in layers],
            [np.array(layer["bias"], dtype=np.float64) for layer in layers],
        )


@dataclass
class AdamState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            label = names[k] if names is not None else f"#{k}"
            raise FloatingPointError(f"non-finite gradient for parameter {label}")
    m = state.m or [np.zeros_like(p, dtype=np.float64) for p in params]
    v = state.v or [np.zeros_like(p, dtype=np.float64) for p in params]
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * mk + (1 - b1) * g for mk, g in zip(m, grads)]
    new_v = [b2 * vk + (1 - b2) * g * g for vk, g in zip(v, grads)]
    c1, c2 = 1 - b1**step, 1 - b2**step
    new_params = [
        p - state.lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps)
        for p, mk, vk in zip(params, new_m, new_v)
    ]
    new_state = AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)
    return new_params, new_state
