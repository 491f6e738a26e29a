# app/services/autodiff.py
"""
Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation returns a new Node holding its
forward value and a closure that maps the node's upstream gradient to the
gradients of its parents. Node values are read-only once created; parameters
are updated by assigning a fresh array through ``Node.assign``.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import DomainError, ShapeError

ArrayLike = Union[np.ndarray, Sequence[float], float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class Node:
    """A value in the differentiation graph together with its gradient."""

    def __init__(
        self,
        value: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Node", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        array = np.array(value, dtype=np.float64)
        self.value = _freeze(array)
        self.grad = np.zeros_like(array)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def assign(self, value: ArrayLike) -> None:
        array = np.array(value, dtype=np.float64)
        if array.shape != self.value.shape:
            raise ShapeError(f"cannot assign shape {array.shape} to node of shape {self.value.shape}")
        self.value = _freeze(array)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element node, got shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, _as_node(other))

    def __radd__(self, other: "Node") -> "Node":
        return add(_as_node(other), self)

    def __sub__(self, other: "Node") -> "Node":
        return subtract(self, _as_node(other))

    def __rsub__(self, other: "Node") -> "Node":
        return subtract(_as_node(other), self)

    def __mul__(self, other: "Node") -> "Node":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_node(other))

    def __rmul__(self, other: "Node") -> "Node":
        return self.__mul__(other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def constant(value: ArrayLike, name: Optional[str] = None) -> Node:
    return Node(value, requires_grad=False, name=name)


def parameter(value: ArrayLike, name: Optional[str] = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def _as_node(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


def _result(value: np.ndarray, parents: Tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    needs_grad = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs_grad, parents=parents if needs_grad else (),
                backward_fn=backward_fn if needs_grad else None)


# --- broadcasting -------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not compatible "
                     f"(equal shapes or broadcast over the leading batch dimension)")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


# --- elementwise --------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_broadcast(a.value, b.value, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), backward)


def subtract(a: Node, b: Node) -> Node:
    _check_broadcast(a.value, b.value, "subtract")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.value - b.value, (a, b), backward)


def multiply(a: Node, b: Node) -> Node:
    _check_broadcast(a.value, b.value, "multiply")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _result(a.value * b.value, (a, b), backward)


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result(a.value * factor, (a,), backward)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, a.value, 0.0), (a,), backward)


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward)


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("log: argument contains non-positive values")

    def backward(g):
        return (g / a.value,)

    return _result(np.log(a.value), (a,), backward)


# --- linear algebra and reductions -------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return _result(a.value @ b.value, (a, b), backward)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D operand, got {a.shape}")

    def backward(g):
        return (g.T,)

    return _result(a.value.T, (a,), backward)


def sum(a: Node, axis: Optional[int] = None) -> Node:  # noqa: A001
    out = a.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Node, axis: Optional[int] = None) -> Node:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), backward)


# --- structural ---------------------------------------------------------------

def concatenate(nodes: Sequence[Node]) -> Node:
    nodes = tuple(nodes)
    if not nodes:
        raise ShapeError("concatenate: no inputs")
    trailing = nodes[0].shape[1:]
    for node in nodes:
        if node.value.ndim == 0 or node.shape[1:] != trailing:
            raise ShapeError(f"concatenate: trailing shapes differ ({node.shape} vs (*, {trailing}))")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _result(np.concatenate([n.value for n in nodes], axis=0), nodes, backward)


def select_rows(a: Node, rows: Sequence[int]) -> Node:
    index = np.asarray(rows, dtype=np.int64)
    if a.value.ndim == 0:
        raise ShapeError("select_rows: cannot index a scalar")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"select_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.value[index], (a,), backward)


def dropout_mask_apply(a: Node, keep_mask: np.ndarray, rate: float) -> Node:
    """Inverted dropout: multiply by a pre-sampled keep mask scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    keep_mask = np.asarray(keep_mask, dtype=np.float64)
    if keep_mask.shape != a.shape:
        raise ShapeError(f"dropout mask shape {keep_mask.shape} does not match input {a.shape}")
    factor = keep_mask / (1.0 - rate)

    def backward(g):
        return (g * factor,)

    return _result(a.value * factor, (a,), backward)


def gradient_reversal(a: Node, lam: float = 1.0) -> Node:
    """Identity in the forward pass; multiplies the gradient by -lam on the way back."""
    lam = float(lam)

    def backward(g):
        return (-lam * g,)

    return _result(a.value, (a,), backward)


def detach(a: Node) -> Node:
    return constant(a.value)


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros((labels.shape[0], num_classes))
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def cross_entropy_terms(logits: Node, labels: Sequence[int]) -> Node:
    """Per-row negative log-likelihood, built from log-softmax (never log of softmax)."""
    picked = multiply(log_softmax(logits), constant(one_hot(labels, logits.shape[-1])))
    return scale(sum(picked, axis=1), -1.0)


# --- backward -----------------------------------------------------------------

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every node of the graph that requires a gradient."""
    if root.size != 1:
        raise DomainError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    for node in order:
        if not node.is_leaf:
            node.zero_grad()
    root.grad = root.grad + np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        for parent, grad in zip(node.parents, node.backward_fn(node.grad)):
            if parent.requires_grad and grad is not None:
                parent.grad = parent.grad + np.reshape(grad, parent.shape)


_OPERATIONS: Dict[str, Callable[..., Node]] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "scale": scale,
    "concatenate": lambda *nodes: concatenate(nodes),
    "select_rows": select_rows,
    "dropout": dropout_mask_apply,
    "gradient_reversal": gradient_reversal,
}


def forward_op(kind: str, *inputs, **kwargs) -> Node:
    """Apply the operation named ``kind`` to graph nodes, e.g. ``forward_op("add", a, b)``."""
    try:
        op = _OPERATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}; supported: {sorted(_OPERATIONS)}") from None
    return op(*inputs, **kwargs)


def numerical_gradient(objective: Callable[[], float], leaf: Node, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar objective with respect to one leaf."""
    base = leaf.value.copy()
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[index] = base[index] + step
        leaf.assign(shifted)
        upper = objective()
        shifted[index] = base[index] - step
        leaf.assign(shifted)
        lower = objective()
        grad[index] = (upper - lower) / (2.0 * step)
    leaf.assign(base)
    return grad
