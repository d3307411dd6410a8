"""Input-output Jacobians of logit functions and their squared Frobenius norms.

Functions here take ``f``, a callable mapping a ``(B, D)`` tensor to ``(B, C)``
logits. Samples must not interact inside ``f`` (true for the models in this
package), which lets one backward pass per class produce that Jacobian row
for the whole batch at once.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .backprop import grad
from .core import Graph, Tensor

LogitFn = Callable[[Tensor], Tensor]


def _attached_input(x, graph: Graph | None = None) -> Tensor:
    if isinstance(x, Tensor) and x.graph is not None:
        return x
    return (graph or Graph()).leaf(x.data if isinstance(x, Tensor) else x)


def jacobian_rows(
    f: LogitFn, x: Tensor, create_graph: bool = True, logits: Tensor | None = None
) -> list[Tensor]:
    """Row ``p`` of every sample's Jacobian, as ``C`` tensors of shape ``(B, D)``.

    A detached ``x`` is attached to a fresh graph. Pass ``logits = f(x)``
    when it has already been computed on the graph ``x`` belongs to.
    """
    if logits is None:
        x = _attached_input(x)
        logits = f(x)
    n_classes = logits.shape[1]
    rows = []
    for p in range(n_classes):
        e = np.zeros(n_classes)
        e[p] = 1.0
        s = ops.sum(ops.multiply(logits, e))
        rows.append(grad(s, [x], create_graph=create_graph)[0])
    return rows


def jacobian_exact(f: LogitFn, x, create_graph: bool = True) -> Tensor:
    """The ``C x D`` Jacobian of ``f`` at a single input ``x`` of shape ``(D,)``."""
    x = _attached_input(x)
    if x.ndim != 1:
        raise ValueError(f"jacobian_exact expects a single input of shape (D,), got {x.shape}")
    xb = ops.reshape(x, (1, x.shape[0]))
    rows = jacobian_rows(f, xb, create_graph=create_graph)
    n_classes = len(rows)
    jac = None
    for p, row in enumerate(rows):
        e = np.zeros((n_classes, 1))
        e[p, 0] = 1.0
        term = ops.matmul(e, row)
        jac = term if jac is None else ops.add(jac, term)
    return jac


def frob_sq(jac) -> Tensor:
    """Sum of squared entries."""
    return ops.sum(ops.square(jac))


def batch_frob_sq(
    f: LogitFn, x: Tensor, create_graph: bool = True, logits: Tensor | None = None
) -> Tensor:
    """Per-sample ``||J(x_i)||_F^2`` for a ``(B, D)`` batch, shape ``(B,)``."""
    total = None
    for row in jacobian_rows(f, x, create_graph=create_graph, logits=logits):
        term = ops.sum(ops.square(row), axis=1)
        total = term if total is None else ops.add(total, term)
    return total


def _unit_directions(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def batch_frob_sq_estimate(
    f: LogitFn,
    x: Tensor,
    n_proj: int,
    rng: np.random.Generator | int | None = None,
    directions: np.ndarray | None = None,
    create_graph: bool = True,
    logits: Tensor | None = None,
) -> Tensor:
    """Random-projection estimate of per-sample ``||J(x_i)||_F^2``, shape ``(B,)``.

    Uses ``C * mean_k ||v_k^T J||^2`` with ``v_k`` uniform on the unit sphere,
    drawn independently per sample. ``directions`` of shape ``(n_proj, C)`` or
    ``(n_proj, B, C)`` overrides the random draw.
    """
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    rng = np.random.default_rng(rng)
    if logits is None:
        x = _attached_input(x)
        logits = f(x)
    b, n_classes = logits.shape
    total = None
    for k in range(n_proj):
        if directions is not None:
            v = np.broadcast_to(np.asarray(directions[k], dtype=np.float64), (b, n_classes))
        else:
            v = _unit_directions(rng, (b, n_classes))
        s = ops.sum(ops.multiply(logits, v))
        (row,) = grad(s, [x], create_graph=create_graph)
        term = ops.sum(ops.square(row), axis=1)
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, n_classes / n_proj)


def frob_sq_estimate(
    f: LogitFn,
    x,
    n_proj: int,
    rng: np.random.Generator | int | None = None,
    directions: np.ndarray | None = None,
) -> Tensor:
    """Unbiased projection estimate of ``||J(x)||_F^2`` at a single ``(D,)`` input."""
    x = _attached_input(x)
    xb = ops.reshape(x, (1, x.shape[0]))
    est = batch_frob_sq_estimate(f, xb, n_proj, rng=rng, directions=directions)
    return ops.sum(est)
