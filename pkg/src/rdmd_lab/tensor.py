"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

A ``Graph`` is a tape: every op whose inputs require gradient appends one
node, so node order is already topological. ``backward`` walks the tape once
in reverse and then clears it; a graph is rebuilt for every training step.

Leaves are created with ``Graph.param(name, values)`` and gradients come back
keyed by that name. Tensors built without a graph are constants and every op
on constants is evaluated without recording, which is how inference runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from rdmd_lab.errors import GraphError, ShapeError, ValidationError

LEAKY_SLOPE = 0.01

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    value: np.ndarray
    vjp: Vjp | None = None
    name: str | None = None


class Graph:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.generation = 0

    def param(self, name: str, values) -> "Tensor":
        if name in self.leaves:
            raise GraphError(f"leaf {name!r} already registered in this graph")
        t = Tensor(values)
        node_id = self._append(Node(op="leaf", inputs=(), value=t.values, name=name))
        self.leaves[name] = node_id
        t.requires_grad = True
        t.graph = self
        t.node_id = node_id
        t.generation = self.generation
        return t

    def clear(self) -> None:
        self.nodes.clear()
        self.leaves.clear()
        self.generation += 1

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("values", "requires_grad", "graph", "node_id", "generation")

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor values must be finite (NaN/Inf rejected)")
        self.values = arr
        self.requires_grad = False
        self.graph: Graph | None = None
        self.node_id: int | None = None
        self.generation = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, as_tensor(other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, as_tensor(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = value
    out.requires_grad = False
    out.graph = None
    out.node_id = None
    out.generation = -1

    graph: Graph | None = None
    for t in inputs:
        if not t.requires_grad:
            continue
        if t.graph is None or t.generation != t.graph.generation:
            raise GraphError(f"{op}: input belongs to a cleared graph")
        if graph is None:
            graph = t.graph
        elif graph is not t.graph:
            raise GraphError(f"{op}: inputs come from different graphs")
    if graph is None:
        return out

    ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
    out.node_id = graph._append(Node(op=op, inputs=ids, value=value, vjp=vjp))
    out.graph = graph
    out.generation = graph.generation
    out.requires_grad = True
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.values + b.values, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _result("subtract", a.values - b.values, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)
    av, bv = a.values, b.values
    return _result("multiply", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.values * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values

    def vjp(g: np.ndarray):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _result("matmul", av @ bv, (a, b), vjp)


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != b.values.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} do not conform")
    split = a.shape[-1]
    value = np.concatenate([a.values, b.values], axis=-1)
    return _result("concat", value, (a, b), lambda g: (g[..., :split], g[..., split:]))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    av = a.values
    slopes = np.where(av > 0, 1.0, slope)
    return _result("leaky_relu", av * slopes, (a,), lambda g: (g * slopes,))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    if a.values.ndim != 2 or bias.values.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shapes {a.shape} and {bias.shape} do not conform")
    return _result("add_bias", a.values + bias.values, (a, bias), lambda g: (g, g.sum(axis=0)))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return _result("sum", np.array(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.values.size
    return _result("mean", np.array(a.values.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def sum_of_squares(a: Tensor) -> Tensor:
    av = a.values
    return _result("sum_of_squares", np.array(np.sum(av * av)), (a,), lambda g: (2.0 * float(g) * av,))


def backward(graph: Graph, root: Tensor) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``root`` w.r.t. every leaf of ``graph``.

    Leaves the root does not depend on get zeros. The graph is cleared
    afterwards, so any further use of its tensors raises ``GraphError``.
    """
    if root.values.size != 1 or root.values.ndim > 1:
        raise GraphError(f"backward: root must be a scalar, got shape {root.shape}")
    if (
        root.graph is not graph
        or root.node_id is None
        or root.generation != graph.generation
        or graph.nodes[root.node_id].value is not root.values
    ):
        raise GraphError("backward: root was not produced by this graph")

    pending: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    leaf_grads: dict[str, np.ndarray] = {}
    for node_id in range(root.node_id, -1, -1):
        g = pending.pop(node_id, None)
        if g is None:
            continue
        node = graph.nodes[node_id]
        if node.op == "leaf":
            leaf_grads[node.name] = g
            continue
        for input_id, input_grad in zip(node.inputs, node.vjp(g)):
            if input_id is None or input_grad is None:
                continue
            prev = pending.get(input_id)
            pending[input_id] = input_grad if prev is None else prev + input_grad

    grads = {
        name: leaf_grads.get(name, np.zeros_like(graph.nodes[node_id].value))
        for name, node_id in graph.leaves.items()
    }
    graph.clear()
    return grads
