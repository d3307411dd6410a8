"""Universal adversarial perturbations under an l-infinity budget.

A single perturbation ``delta`` is grown by sign-gradient ascent on the summed
cross-entropy of perturbed training batches, projected back onto the
``epsilon`` ball after every step. The sweep over random seeds keeps the
perturbation with the highest test-set attack success rate.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .autodiff import Graph, NonFiniteError, grad, ops
from .data import Dataset
from .ensemble import as_ensemble, ensemble_forward, ensemble_log_prob
from .models import argmax_labels

UAP_MAGIC = b"JUAP"
UAP_VERSION = 1
FEASIBILITY_TOL = 1e-12


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class UapConfig:
    epsilon: float
    iterations: int = 100
    batch_size: int = 200
    step_size: float | None = None
    seeds: int = 50
    clip_inputs: bool = True

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.iterations < 1 or self.batch_size < 1 or self.seeds < 1:
            raise ValueError("iterations, batch_size and seeds must be >= 1")

    @property
    def step(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size


@dataclass
class Perturbation:
    delta: np.ndarray
    epsilon: float
    seed: int
    success_rate: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if np.max(np.abs(self.delta), initial=0.0) > self.epsilon + FEASIBILITY_TOL:
            raise ValueError("perturbation exceeds its l-infinity budget")


def project_linf(delta, epsilon: float) -> np.ndarray:
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def perturb(images: np.ndarray, delta: np.ndarray, clip_inputs: bool = True) -> np.ndarray:
    x = images + delta
    return np.clip(x, 0.0, 1.0) if clip_inputs else x


def attack_success_rate(target, ds: Dataset, delta, clip_inputs: bool = True, chunk: int = 1000) -> float:
    """Fraction of ``ds`` whose prediction on ``x + delta`` differs from the true label."""
    ens = as_ensemble(target)
    delta = np.asarray(delta, dtype=np.float64)
    wrong = 0
    for start in range(0, len(ds), chunk):
        x = perturb(ds.images[start:start + chunk], delta, clip_inputs)
        wrong += int(np.sum(argmax_labels(ensemble_forward(ens, x)) != ds.labels[start:start + chunk]))
    return wrong / len(ds)


def robust_accuracy(target, ds: Dataset, delta, clip_inputs: bool = True) -> float:
    return 1.0 - attack_success_rate(target, ds, delta, clip_inputs)


def uap_loss(target, images: np.ndarray, labels: np.ndarray, delta, clip_inputs: bool = True) -> float:
    """Summed cross-entropy of the perturbed batch (the attack objective)."""
    ens = as_ensemble(target)
    x = perturb(images, np.asarray(delta, dtype=np.float64), clip_inputs)
    return float(-np.sum(ensemble_log_prob(ens, x, labels).data))


def sgd_uap(target, ds_train: Dataset, cfg: UapConfig, seed: int, ds_test: Dataset | None = None) -> Perturbation:
    """One seed of sign-gradient ascent; the success rate is measured on ``ds_test``
    (``ds_train`` when omitted)."""
    ens = as_ensemble(target)
    rng = np.random.default_rng(seed)
    eps = cfg.epsilon
    delta = rng.uniform(-eps, eps, size=ds_train.dim)
    n = len(ds_train)
    batch = min(cfg.batch_size, n)
    for it in range(cfg.iterations):
        idx = rng.choice(n, size=batch, replace=False)
        graph = Graph()
        d = graph.leaf(delta)
        x = ops.add(ds_train.images[idx], d)
        if cfg.clip_inputs:
            x = ops.clip(x, 0.0, 1.0)
        try:
            loss = ops.scale(ops.sum(ensemble_log_prob(ens, x, ds_train.labels[idx])), -1.0)
            (g,) = grad(loss, [d])
        except NonFiniteError as exc:
            raise AttackError(f"non-finite attack loss at iteration {it} (seed {seed})") from exc
        delta = project_linf(delta + cfg.step * np.sign(g.data), eps)
    rate = attack_success_rate(ens, ds_test if ds_test is not None else ds_train, delta, cfg.clip_inputs)
    return Perturbation(delta, eps, seed, rate)


def worst_case_uap(target, ds_train: Dataset, ds_test: Dataset, cfg: UapConfig, base_seed: int = 0) -> Perturbation:
    """Best of ``cfg.seeds`` runs by test success rate; ties go to the lowest seed."""
    best = None
    rates: dict[int, float] = {}
    failures: dict[int, str] = {}
    for seed in range(base_seed, base_seed + cfg.seeds):
        try:
            p = sgd_uap(target, ds_train, cfg, seed, ds_test)
        except AttackError as exc:
            failures[seed] = str(exc)
            continue
        rates[seed] = p.success_rate
        if best is None or p.success_rate > best.success_rate:
            best = p
    if best is None:
        raise AttackError(f"all {cfg.seeds} attack seeds failed")
    best.meta = {"per_seed_rates": rates, "failed_seeds": failures}
    return best


# ---------------------------------------------------------------- persistence

def perturbation_to_bytes(p: Perturbation, config_hash: str = "") -> bytes:
    tag = config_hash.encode("ascii")
    head = UAP_MAGIC + struct.pack("<HddqIH", UAP_VERSION, p.epsilon, p.success_rate, p.seed, p.delta.size, len(tag))
    return head + tag + np.ascontiguousarray(p.delta, dtype="<f8").tobytes()


def perturbation_from_bytes(raw: bytes) -> tuple[Perturbation, str]:
    if raw[:4] != UAP_MAGIC:
        raise ValueError("bad perturbation magic bytes")
    fmt = "<HddqIH"
    version, eps, rate, seed, dim, tag_len = struct.unpack_from(fmt, raw, 4)
    if version != UAP_VERSION:
        raise ValueError(f"unsupported perturbation format version {version}")
    pos = 4 + struct.calcsize(fmt)
    tag = raw[pos:pos + tag_len].decode("ascii")
    pos += tag_len
    if len(raw) - pos != 8 * dim:
        raise ValueError("perturbation payload has the wrong length")
    delta = np.frombuffer(raw, dtype="<f8", count=dim, offset=pos).astype(np.float64)
    # Perturbation() re-checks the budget on load
    return Perturbation(delta, eps, seed, rate), tag


def save_perturbation(path, p: Perturbation, config_hash: str = "") -> Path:
    return atomic_write_bytes(path, perturbation_to_bytes(p, config_hash))


def load_perturbation(path) -> tuple[Perturbation, str]:
    return perturbation_from_bytes(Path(path).read_bytes())


def perturbation_image(p: Perturbation, image_hw: tuple[int, int]) -> np.ndarray:
    """uint8 image with ``[-eps, eps]`` mapped linearly onto ``[0, 255]``."""
    scaled = (p.delta + p.epsilon) / (2 * p.epsilon) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8).reshape(image_hw)


def save_perturbation_png(path, p: Perturbation, image_hw: tuple[int, int]) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(perturbation_image(p, image_hw)).save(path, format="PNG")
    return path
