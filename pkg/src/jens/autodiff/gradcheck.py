"""Finite-difference verification of first- and second-order gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .backprop import grad
from .core import Graph, Tensor

LossFn = Callable[[list[Tensor]], Tensor]


@dataclass
class GradCheckReport:
    first_order_error: float
    second_order_error: float | None
    curvature_error: float | None
    tol: float
    n_checked: int

    @property
    def max_error(self) -> float:
        errs = [self.first_order_error, self.second_order_error, self.curvature_error]
        return max(e for e in errs if e is not None)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b|`` scaled by the larger of the two infinity norms."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def _loss_value(loss_fn: LossFn, values: Sequence[np.ndarray]) -> float:
    g = Graph()
    return loss_fn(g.leaves(values)).item()


def _loss_grad(loss_fn: LossFn, values: Sequence[np.ndarray]) -> list[np.ndarray]:
    g = Graph()
    leaves = g.leaves(values)
    return [t.data for t in grad(loss_fn(leaves), leaves)]


def check_gradients(
    params: Sequence[np.ndarray],
    loss_fn: LossFn,
    tol: float = 1e-4,
    step: float = 1e-4,
    second_order: bool = True,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives one graph leaf per array in ``params`` and returns a
    scalar tensor. First order: every entry (or a random subset of
    ``max_entries``) of the gradient against ``(L(p+h) - L(p-h)) / 2h``.
    Second order: the Hessian-vector product from a double backward pass
    against central differences of the gradient along a random direction
    ``v``, plus ``v^T H v`` against the pure second difference of ``L``.
    """
    values = [np.array(p, dtype=np.float64) for p in params]
    rng = np.random.default_rng(seed)

    auto = _loss_grad(loss_fn, values)
    flat_sizes = [v.size for v in values]
    total = sum(flat_sizes)
    picks = np.arange(total)
    if max_entries is not None and max_entries < total:
        picks = np.sort(rng.choice(total, size=max_entries, replace=False))
    offsets = np.cumsum([0] + flat_sizes)

    auto_flat = np.concatenate([a.ravel() for a in auto])[picks]
    fd = np.empty(len(picks))
    for n, flat_i in enumerate(picks):
        k = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        j = flat_i - offsets[k]
        plus = [v.copy() for v in values]
        minus = [v.copy() for v in values]
        plus[k].ravel()[j] += step
        minus[k].ravel()[j] -= step
        fd[n] = (_loss_value(loss_fn, plus) - _loss_value(loss_fn, minus)) / (2 * step)
    first = relative_error(auto_flat, fd)

    second = curvature = None
    if second_order:
        direction = [rng.standard_normal(v.shape) for v in values]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
        direction = [d / norm for d in direction]

        g = Graph()
        leaves = g.leaves(values)
        loss = loss_fn(leaves)
        grads = grad(loss, leaves, create_graph=True)
        dot = None
        for gi, d in zip(grads, direction):
            term = ops.sum(ops.multiply(gi, d))
            dot = term if dot is None else ops.add(dot, term)
        hvp = [t.data for t in grad(dot, leaves)]

        plus = [v + step * d for v, d in zip(values, direction)]
        minus = [v - step * d for v, d in zip(values, direction)]
        g_plus = _loss_grad(loss_fn, plus)
        g_minus = _loss_grad(loss_fn, minus)
        hvp_fd = [(a - b) / (2 * step) for a, b in zip(g_plus, g_minus)]
        second = relative_error(
            np.concatenate([h.ravel() for h in hvp]), np.concatenate([h.ravel() for h in hvp_fd])
        )

        vhv = sum(float(np.sum(h * d)) for h, d in zip(hvp, direction))
        l0 = loss.item()
        lp = _loss_value(loss_fn, [v + step * d for v, d in zip(values, direction)])
        lm = _loss_value(loss_fn, [v - step * d for v, d in zip(values, direction)])
        vhv_fd = (lp - 2 * l0 + lm) / step**2
        curvature = abs(vhv - vhv_fd) / max(abs(vhv), abs(vhv_fd), 1e-300)

    return GradCheckReport(first, second, curvature, tol, len(picks))
