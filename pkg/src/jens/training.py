"""Training a single base learner on the Jacobian-regularized joint loss.

The objective is mean cross-entropy plus ``lambda_jr / 2`` times the batch
mean of ``||J(x_i)||_F^2``, with ``J`` the input-output Jacobian of the logits.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import Graph, NonFiniteError, Tensor, grad, ops
from .autodiff.jacobian import batch_frob_sq, batch_frob_sq_estimate
from .data import BatchPlan, Dataset
from .models import ModelParams, argmax_labels, forward_logits

OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "cyclic_cosine")
JACOBIAN_MODES = ("exact", "projection")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lambda_jr: float = 0.0
    epochs: int = 5
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    cycles: int = 1
    seed: int = 0
    jacobian_mode: str = "exact"
    n_proj: int = 1

    def __post_init__(self):
        if self.lambda_jr < 0:
            raise ValueError("lambda_jr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ValueError(f"jacobian_mode must be one of {JACOBIAN_MODES}")
        if self.n_proj < 1:
            raise ValueError("n_proj must be >= 1")

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)


def default_config(arch_tag: str, **overrides) -> TrainConfig:
    """Adam at 1e-3 for the MLP, SGD with momentum 0.9 at 0.05 for LeNet."""
    if arch_tag == "lenet":
        base = TrainConfig(optimizer="sgd", lr=0.05, momentum=0.9)
    else:
        base = TrainConfig(optimizer="adam", lr=1e-3)
    return replace(base, **overrides)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce_term: float
    jr_term: float
    lr: float


@dataclass
class TrainRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    snapshot_steps: list[int] = field(default_factory=list)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "ce_term", "jr_term", "lr"])
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.loss), repr(e.ce_term), repr(e.jr_term), repr(e.lr)])
        return buf.getvalue()


# ---------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    return ops.scale(ops.mean(ops.gather_row(ops.log_softmax(logits), labels)), -1.0)


def joint_loss_terms(
    model: ModelParams,
    batch_x,
    batch_y,
    lambda_jr: float,
    jacobian_mode: str = "exact",
    params: Sequence[Tensor] | None = None,
    n_proj: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """``(total, cross_entropy, jr_term)``; ``jr_term`` is None when ``lambda_jr == 0``."""
    labels = np.asarray(batch_y, dtype=np.intp)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if params is None:
        graph = Graph()
        params = graph.leaves(model.params)
    else:
        graph = params[0].graph or Graph()

    def f(x):
        return forward_logits(model, x, params)

    if lambda_jr == 0:
        logits = f(batch_x)
        ce = cross_entropy(logits, labels)
        return ce, ce, None

    x = batch_x if isinstance(batch_x, Tensor) and batch_x.graph is graph else graph.leaf(
        batch_x.data if isinstance(batch_x, Tensor) else batch_x
    )
    logits = f(x)
    ce = cross_entropy(logits, labels)
    if jacobian_mode == "exact":
        per_sample = batch_frob_sq(f, x, logits=logits)
    elif jacobian_mode == "projection":
        per_sample = batch_frob_sq_estimate(f, x, n_proj, rng=rng, logits=logits)
    else:
        raise ValueError(f"unknown jacobian_mode {jacobian_mode!r}")
    jr = ops.scale(ops.mean(per_sample), lambda_jr / 2.0)
    return ops.add(ce, jr), ce, jr


def joint_loss(model, batch_x, batch_y, lambda_jr, jacobian_mode="exact", **kwargs) -> Tensor:
    return joint_loss_terms(model, batch_x, batch_y, lambda_jr, jacobian_mode, **kwargs)[0]


# ---------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_train(cls, cfg: TrainConfig, lr: float | None = None) -> OptimizerConfig:
        return cls(cfg.optimizer, cfg.lr if lr is None else lr, cfg.momentum, cfg.beta1, cfg.beta2, cfg.adam_eps)


def init_optimizer_state(params: Sequence[np.ndarray], kind: str) -> dict:
    zeros = [np.zeros_like(p) for p in params]
    if kind == "adam":
        return {"step": 0, "m": zeros, "v": [np.zeros_like(p) for p in params]}
    return {"step": 0, "velocity": zeros}


def optimizer_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict | None, hyper: OptimizerConfig
) -> tuple[list[np.ndarray], dict]:
    """One SGD-momentum or Adam update. Inputs are not modified."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("gradients do not align with parameters")
    if state is None:
        state = init_optimizer_state(params, hyper.kind)
    t = state["step"] + 1
    if hyper.kind == "sgd":
        velocity = [hyper.momentum * v + g for v, g in zip(state["velocity"], grads)]
        new = [p - hyper.lr * v for p, v in zip(params, velocity)]
        return new, {"step": t, "velocity": velocity}
    if hyper.kind == "adam":
        b1, b2 = hyper.beta1, hyper.beta2
        m = [b1 * mi + (1 - b1) * g for mi, g in zip(state["m"], grads)]
        v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state["v"], grads)]
        c1, c2 = 1 - b1**t, 1 - b2**t
        new = [p - hyper.lr * (mi / c1) / (np.sqrt(vi / c2) + hyper.eps) for p, mi, vi in zip(params, m, v)]
        return new, {"step": t, "m": m, "v": v}
    raise ValueError(f"unknown optimizer {hyper.kind!r}")


# ---------------------------------------------------------------- schedule

def cycle_length(total_steps: int, cycles: int) -> int:
    return math.ceil(total_steps / cycles)


def cyclic_cosine_lr(step: int, lr0: float, length: int) -> float:
    return lr0 / 2.0 * (math.cos(math.pi * (step % length) / length) + 1.0)


def snapshot_steps(total_steps: int, cycles: int) -> list[int]:
    """Steps (0-based) after which a cycle ends; the last step always counts."""
    length = cycle_length(total_steps, cycles)
    steps = [t for t in range(total_steps) if (t + 1) % length == 0]
    if not steps or steps[-1] != total_steps - 1:
        steps.append(total_steps - 1)
    return steps


# ---------------------------------------------------------------- training loop

def train(
    model: ModelParams, ds: Dataset, cfg: TrainConfig
) -> tuple[ModelParams, TrainRecord, list[ModelParams]]:
    """Optimize the joint loss; returns ``(final, record, snapshots)``.

    Snapshots are only collected for the ``cyclic_cosine`` schedule, one at
    the end of each of ``cfg.cycles`` cycles.
    """
    if len(ds) == 0:
        raise ValueError("empty training set")
    plan = BatchPlan(cfg.batch_size, seed=cfg.seed)
    per_epoch = plan.steps_per_epoch(len(ds))
    total_steps = per_epoch * cfg.epochs
    cyclic = cfg.lr_schedule == "cyclic_cosine"
    ends: set[int] = set()
    length = total_steps
    if cyclic:
        length = cycle_length(total_steps, cfg.cycles)
        ends_list = snapshot_steps(total_steps, cfg.cycles)
        if len(ends_list) != cfg.cycles:
            raise ValueError(
                f"{total_steps} steps cannot be split into {cfg.cycles} cosine cycles"
            )
        ends = set(ends_list)

    rng = np.random.default_rng([cfg.seed, 1])
    params = [p.copy() for p in model.params]
    state = None
    record = TrainRecord()
    snapshots: list[ModelParams] = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        n_seen = 0
        lr = cfg.lr
        for idx in plan.batches(len(ds), epoch):
            lr = cyclic_cosine_lr(step, cfg.lr, length) if cyclic else cfg.lr
            graph = Graph()
            leaves = graph.leaves(params)
            try:
                total, ce, jr = joint_loss_terms(
                    model, ds.images[idx], ds.labels[idx], cfg.lambda_jr, cfg.jacobian_mode,
                    params=leaves, n_proj=cfg.n_proj, rng=rng,
                )
                grads = [g.data for g in grad(total, leaves)]
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {exc}") from exc
            params, state = optimizer_step(params, grads, state, OptimizerConfig.from_train(cfg, lr))
            if not all(np.all(np.isfinite(p)) for p in params):
                raise DivergenceError(f"non-finite parameters after step {step} (epoch {epoch})")
            sums += len(idx) * np.array([total.item(), ce.item(), 0.0 if jr is None else jr.item()])
            n_seen += len(idx)
            if step in ends:
                snapshots.append(model.with_params(params))
                record.snapshot_steps.append(step)
            step += 1
        loss, ce_mean, jr_mean = sums / n_seen
        record.epochs.append(EpochRecord(epoch, float(loss), float(ce_mean), float(jr_mean), float(lr)))
    return model.with_params(params), record, snapshots


def accuracy(model, ds: Dataset) -> float:
    """Fraction correct for a model or any callable returning logits."""
    logits = model(ds.images)
    return float(np.mean(argmax_labels(logits) == ds.labels))
