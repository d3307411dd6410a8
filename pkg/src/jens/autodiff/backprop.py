"""Reverse-mode differentiation over a :class:`~jens.autodiff.core.Graph`."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import OPS, AutodiffError, GraphMismatchError, Tensor
from .ops import add

GradMap = dict[int, Tensor]


def backward(output: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> GradMap:
    """Gradients of scalar ``output`` with respect to each tensor in ``leaves``.

    Returns a mapping from node id to gradient. Leaves that ``output`` does not
    depend on get an all-zero gradient rather than an error. With
    ``create_graph`` the adjoint computations are recorded on the same graph,
    so the returned gradients can themselves be differentiated.
    """
    graph = output.graph
    if output.size != 1:
        raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
    if graph is None:
        raise AutodiffError("output is not attached to a graph")
    for leaf in leaves:
        if leaf.graph is not graph:
            raise GraphMismatchError("leaf does not belong to the output's graph")

    nodes = graph.nodes
    out_id = output.node
    leaf_ids = [leaf.node for leaf in leaves]
    zeros = {lid: Tensor(np.zeros_like(nodes[lid].value)) for lid in leaf_ids}
    if not leaf_ids:
        return {}
    lo = min(leaf_ids)
    if lo > out_id:
        return zeros

    # nodes that depend on at least one requested leaf
    live = np.zeros(out_id + 1, dtype=bool)
    live[[i for i in leaf_ids if i <= out_id]] = True
    for nid in range(lo, out_id + 1):
        if not live[nid] and any(live[i] for i in nodes[nid].inputs):
            live[nid] = True
    if not live[out_id]:
        return zeros

    def view(nid: int) -> Tensor:
        return graph.tensor(nid) if create_graph else Tensor._wrap(nodes[nid].value)

    grads: dict[int, Tensor] = {out_id: Tensor(np.ones_like(output.data))}
    for nid in range(out_id, lo - 1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or not node.inputs:
            continue
        needs = tuple(bool(live[i]) for i in node.inputs)
        if not any(needs):
            continue
        ins = tuple(view(i) for i in node.inputs)
        gins = OPS[node.op].adjoint(g, ins, view(nid), needs, **node.attrs)
        for i, need, gi in zip(node.inputs, needs, gins):
            if not need or gi is None:
                continue
            grads[i] = gi if i not in grads else add(grads[i], gi)

    return {lid: grads.get(lid, zeros[lid]) for lid in leaf_ids}


def grad(output: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Like :func:`backward` but returns gradients in the order of ``leaves``."""
    gm = backward(output, leaves, create_graph=create_graph)
    return [gm[leaf.node] for leaf in leaves]
