"""Tensors, the computation graph, and the primitive-op registry.

A :class:`Graph` is an append-only list of :class:`Node` records. Every
primitive application on a graph-attached :class:`Tensor` appends exactly one
node, so node ids double as a topological order. Tensors without a graph are
plain immutable constants; mixing them into a graph op promotes them to
``const`` nodes so the graph can be replayed from its leaves alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphMismatchError(AutodiffError):
    pass


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[..., np.ndarray]
    # adjoint(g, inputs, out, **attrs) -> one gradient Tensor (or None) per input
    adjoint: Callable[..., tuple]


OPS: dict[str, OpDef] = {}


def register(name: str, forward, adjoint) -> None:
    OPS[name] = OpDef(name, forward, adjoint)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: np.ndarray


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


class Tensor:
    """An array value with optional provenance in a :class:`Graph`."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: Graph | None = None, node: int | None = None):
        self.data = _as_array(data)
        self.graph = graph
        self.node = node

    @classmethod
    def _wrap(cls, data: np.ndarray, graph: Graph | None = None, node: int | None = None) -> Tensor:
        # values already known to be finite float64 skip the check
        t = cls.__new__(cls)
        t.data, t.graph, t.node = data, graph, node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        where = f"node={self.node}" if self.graph is not None else "detached"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.subtract(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Graph:
    """Append-only record of primitive applications.

    One computation per instance; graphs are not shared between threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> Tensor:
        arr = _as_array(value).copy()
        nid = self._append(Node("leaf", (), {}, arr))
        return Tensor._wrap(arr, self, nid)

    def leaves(self, values: Sequence) -> list[Tensor]:
        return [self.leaf(v) for v in values]

    def constant(self, value) -> Tensor:
        arr = value.data if isinstance(value, Tensor) else _as_array(value)
        nid = self._append(Node("const", (), {}, arr))
        return Tensor._wrap(arr, self, nid)

    def tensor(self, nid: int) -> Tensor:
        return Tensor._wrap(self.nodes[nid].value, self, nid)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-execute every node in order, optionally substituting leaf values.

        Returns the list of recomputed node values, indexed by node id.
        """
        leaf_values = leaf_values or {}
        values: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                values.append(_as_array(leaf_values.get(nid, node.value)))
            elif node.op == "const":
                values.append(node.value)
            else:
                args = [values[i] for i in node.inputs]
                values.append(OPS[node.op].forward(*args, **node.attrs))
        return values


def apply(name: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``name`` to ``inputs``, recording a node when attached."""
    op = OPS[name]
    tensors = [as_tensor(x) for x in inputs]
    graph = None
    for t in tensors:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif t.graph is not graph:
                raise GraphMismatchError(f"{name}: inputs belong to different graphs")
    # overflow is reported below as NonFiniteError rather than a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out = op.forward(*(t.data for t in tensors), **attrs)
    if out.dtype != DTYPE:
        out = out.astype(DTYPE)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    if graph is None:
        return Tensor._wrap(out)
    ids = tuple(t.node if t.graph is not None else graph.constant(t).node for t in tensors)
    nid = graph._append(Node(name, ids, attrs, out))
    return Tensor._wrap(out, graph, nid)
