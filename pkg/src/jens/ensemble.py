"""Convex-combination ensembles: bagging, snapshot ensembles and soft voting."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .autodiff import Tensor, ops
from .autodiff.jacobian import jacobian_exact
from .data import Dataset, bootstrap_resample
from .models import ArchSpec, ModelParams, forward_logits, init_params, load_model, save_model
from .training import TrainConfig, TrainRecord, train

AGGREGATIONS = ("logit_mean", "prob_mean")
METHODS = ("single", "bagging", "snapshot", "softvote")
SIMPLEX_TOL = 1e-12


class UnsupportedAggregationError(ValueError):
    pass


def check_simplex(weights: Sequence[float]) -> None:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("weights must be a non-empty vector")
    if abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    if np.any(w <= 0) or np.any(w > 1):
        raise ValueError("weights must lie in (0, 1]")
    if len(w) > 1 and np.any(w == 1):
        raise ValueError("a weight of 1 is only allowed for a single member")


@dataclass
class Ensemble:
    members: list[ModelParams]
    weights: tuple[float, ...] = ()
    aggregation: str = "logit_mean"
    method: str = "single"
    meta: dict = field(default_factory=dict)
    records: list[TrainRecord] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if not self.weights:
            self.weights = uniform_weights(len(self.members))
        self.weights = tuple(float(c) for c in self.weights)
        if len(self.weights) != len(self.members):
            raise ValueError("one weight per member required")
        check_simplex(self.weights)
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        d, c = self.members[0].input_dim, self.members[0].class_count
        if any(m.input_dim != d or m.class_count != c for m in self.members):
            raise ValueError("ensemble members disagree on input or class dimension")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def class_count(self) -> int:
        return self.members[0].class_count

    def __call__(self, batch) -> Tensor:
        return ensemble_forward(self, batch)


def uniform_weights(m: int) -> tuple[float, ...]:
    if m == 1:
        return (1.0,)
    # 1/M in float64 can miss the simplex tolerance; absorb the residue in the last weight
    w = [1.0 / m] * m
    w[-1] = 1.0 - sum(w[:-1])
    return tuple(w)


def as_ensemble(target) -> Ensemble:
    if isinstance(target, Ensemble):
        return target
    if isinstance(target, ModelParams):
        return Ensemble([target], (1.0,), "logit_mean", "single")
    raise TypeError(f"cannot treat {type(target).__name__} as an ensemble")


def ensemble_forward(ens: Ensemble, batch) -> Tensor:
    """``sum_i c_i f_i(x)`` for logit_mean, ``sum_i c_i softmax(f_i(x))`` for prob_mean."""
    out = None
    for c, member in zip(ens.weights, ens.members):
        z = forward_logits(member, batch)
        if ens.aggregation == "prob_mean":
            z = ops.softmax(z)
        term = z if c == 1.0 else ops.scale(z, c)
        out = term if out is None else ops.add(out, term)
    return out


def ensemble_log_prob(ens: Ensemble, batch, labels) -> Tensor:
    """Per-sample log-probability the ensemble assigns to ``labels``, shape ``(B,)``.

    For prob_mean this is ``log sum_i c_i p_i(y|x)``, evaluated with a
    constant max-shift so it stays finite when every member is confident.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if ens.aggregation == "logit_mean":
        return ops.gather_row(ops.log_softmax(ensemble_forward(ens, batch)), labels)
    terms = [
        ops.add(ops.gather_row(ops.log_softmax(forward_logits(m, batch)), labels), float(np.log(c)))
        for c, m in zip(ens.weights, ens.members)
    ]
    shift = np.max(np.stack([t.data for t in terms]), axis=0)
    total = None
    for t in terms:
        e = ops.exp(ops.subtract(t, shift))
        total = e if total is None else ops.add(total, e)
    return ops.add(ops.log(total), shift)


def ensemble_jacobian(ens: Ensemble, x) -> Tensor:
    """Jacobian of the aggregated logits at a single input (logit_mean only)."""
    if ens.aggregation != "logit_mean":
        raise UnsupportedAggregationError(
            "the ensemble Jacobian identity only holds for logit_mean aggregation"
        )
    return jacobian_exact(lambda z: ensemble_forward(ens, z), x)


def member_jacobian_sum(ens: Ensemble, x) -> np.ndarray:
    """``sum_i c_i J_i(x)`` computed member by member."""
    return sum(c * jacobian_exact(m, x).data for c, m in zip(ens.weights, ens.members))


# ---------------------------------------------------------------- builders

def _train_member(args):
    arch, ds, cfg, seed, bootstrap = args
    data = bootstrap_resample(ds, seed) if bootstrap else ds
    model, record, _ = train(init_params(arch, seed), data, cfg.with_(seed=seed))
    return model, record


def _train_members(arch, ds, base_cfg, m, seed, bootstrap, jobs):
    tasks = [(arch, ds, base_cfg, seed + i, bootstrap) for i in range(m)]
    if jobs > 1 and m > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_train_member, tasks))
    else:
        out = [_train_member(t) for t in tasks]
    return [m for m, _ in out], [r for _, r in out]


def build_bagging(ds: Dataset, base_cfg: TrainConfig, m: int, seed: int, arch: ArchSpec, jobs: int = 1) -> Ensemble:
    """``m`` learners on bootstrap resamples; member ``i`` uses seed ``seed + i``."""
    if m < 1:
        raise ValueError("M must be >= 1")
    members, records = _train_members(arch, ds, base_cfg, m, seed, True, jobs)
    return Ensemble(members, uniform_weights(m), "logit_mean", "bagging", records=records)


def build_snapshot(ds: Dataset, base_cfg: TrainConfig, m: int, seed: int, arch: ArchSpec) -> Ensemble:
    """One cyclic-cosine run with ``m`` cycles; the cycle-end snapshots are the members."""
    if m < 1:
        raise ValueError("M must be >= 1")
    cfg = base_cfg.with_(lr_schedule="cyclic_cosine", cycles=m, seed=seed)
    _, record, snapshots = train(init_params(arch, seed), ds, cfg)
    return Ensemble(snapshots, uniform_weights(m), "logit_mean", "snapshot", records=[record])


def build_softvote(ds: Dataset, base_cfg: TrainConfig, m: int, seed: int, arch: ArchSpec, jobs: int = 1) -> Ensemble:
    """``m`` learners on the full data with different seeds, averaged in probability space."""
    if m < 1:
        raise ValueError("M must be >= 1")
    members, records = _train_members(arch, ds, base_cfg, m, seed, False, jobs)
    return Ensemble(members, uniform_weights(m), "prob_mean", "softvote", records=records)


def build_single(ds: Dataset, base_cfg: TrainConfig, m: int, seed: int, arch: ArchSpec) -> Ensemble:
    """One learner on the full data; ``m`` must be 1 (kept for a uniform builder signature)."""
    if m != 1:
        raise ValueError("a single model has exactly one learner")
    model, record, _ = train(init_params(arch, seed), ds, base_cfg.with_(seed=seed))
    ens = as_ensemble(model)
    ens.records = [record]
    return ens


BUILDERS = {"single": build_single, "bagging": build_bagging, "snapshot": build_snapshot, "softvote": build_softvote}


# ---------------------------------------------------------------- persistence

def save_ensemble(directory, ens: Ensemble, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, member in enumerate(ens.members):
        name = f"member_{i:02d}.jens"
        save_model(directory / name, member)
        names.append(name)
    manifest = {
        "method": ens.method,
        "M": ens.size,
        "weights": list(ens.weights),
        "aggregation": ens.aggregation,
        "members": names,
        **ens.meta,
        **(extra or {}),
    }
    return atomic_write_text(directory / "ensemble.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    manifest = json.loads((directory / "ensemble.json").read_text())
    members = [load_model(directory / name) for name in manifest["members"]]
    if len(members) != manifest["M"]:
        raise ValueError("manifest member count does not match M")
    meta = {k: v for k, v in manifest.items() if k not in ("method", "M", "weights", "aggregation", "members")}
    return Ensemble(members, tuple(manifest["weights"]), manifest["aggregation"], manifest["method"], meta)
