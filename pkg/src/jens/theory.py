"""Moments of the squared Frobenius norm of convex-combination Jacobians.

If every entry of each member Jacobian ``J_i`` (``C x D``) is iid
``N(mu, sigma^2)``, an entry of ``J_F = sum_i c_i J_i`` is
``N(mu, s2)`` with ``s2 = sigma^2 * sum_i c_i^2``. Squared entries then have
mean ``s2 + mu^2`` and variance ``4 mu^2 s2 + 2 s2^2``, and ``||J_F||_F^2``
scales both by ``C * D``. Since ``1/M <= sum c_i^2 < 1`` for ``M >= 2``, the
ensemble moments sit strictly below the single-model ones and reach the
``1/M`` floor at uniform weights.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .autodiff import Graph
from .autodiff.jacobian import batch_frob_sq
from .data import Dataset
from .ensemble import UnsupportedAggregationError, as_ensemble, ensemble_forward

SAMPLER = "numpy PCG64 + ziggurat standard_normal, SeedSequence.spawn per chunk"
SE_BAND = 4.0


def _simplex_ok(c) -> bool:
    total = sum(c)
    if all(isinstance(x, (Fraction, int)) for x in c):
        exact = total == 1
    else:
        exact = abs(float(total) - 1.0) <= 1e-12
    return exact and all(0 < x <= 1 for x in c)


def sum_sq_weights(c: Sequence) -> float | Fraction:
    """``sum_i c_i^2`` for simplex weights; exact when given Fractions.

    For ``M >= 2`` the result lies in ``[1/M, 1)``.
    """
    c = list(c)
    if not c or not _simplex_ok(c):
        raise ValueError("weights must be positive and sum to 1")
    s = sum(x * x for x in c)
    m = len(c)
    if m >= 2:
        lower = Fraction(1, m) if isinstance(s, Fraction) else 1.0 / m
        # float rounding can put a uniform vector a few ulps under 1/M
        slack = 0 if isinstance(s, Fraction) else 1e-12
        if not (lower - slack <= s < 1):
            raise AssertionError(f"sum of squared weights {s} outside [1/{m}, 1)")
    return s


def random_simplex_fractions(rng: np.random.Generator, m: int, resolution: int = 10**6) -> list[Fraction]:
    """A random point of the open simplex with exact rational coordinates."""
    k = rng.integers(1, resolution, size=m)
    total = int(k.sum())
    return [Fraction(int(ki), total) for ki in k]


def weight_bound_check(ms: Sequence[int] = (2, 4, 8, 16), n: int = 10_000, seed: int = 0) -> dict[int, bool]:
    """For ``n`` random rational simplex vectors per ``M``: ``1/M <= sum c^2 < 1`` exactly."""
    rng = np.random.default_rng(seed)
    out = {}
    for m in ms:
        ok = True
        lower = Fraction(1, m)
        for _ in range(n):
            c = random_simplex_fractions(rng, m)
            s = sum(x * x for x in c)
            ok &= lower <= s < 1
        out[m] = bool(ok)
    return out


@dataclass(frozen=True)
class McConfig:
    M: int = 5
    C: int = 4
    D: int = 6
    mu: float = 0.1
    sigma: float = 0.5
    weights: tuple[float, ...] | None = None
    samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.C < 1 or self.D < 1:
            raise ValueError("M, C and D must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.samples < 1000:
            raise ValueError("need at least 1000 samples")
        if self.weights is not None:
            if len(self.weights) != self.M or not _simplex_ok(list(self.weights)):
                raise ValueError("weights must be M positive numbers summing to 1")
            if self.M > 1 and max(self.weights) >= 1:
                raise ValueError("weights must lie on the open simplex")

    @property
    def c(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M) if self.weights is None else np.asarray(self.weights, dtype=np.float64)


@dataclass(frozen=True)
class Bounds:
    E_single: float
    Var_single: float
    E_lower: float
    Var_lower: float
    E_exact: float
    Var_exact: float


def analytic_bounds(cfg: McConfig) -> Bounds:
    """Moments of ``||J_1||_F^2`` and ``||J_F||_F^2``; ``*_lower`` are the uniform-weight floor."""
    cd = cfg.C * cfg.D
    mu2, s2 = cfg.mu**2, cfg.sigma**2
    # exact throughout when mu and sigma are Fractions
    q = sum_sq_weights(cfg.weights) if cfg.weights is not None else Fraction(1, cfg.M)
    ens_s2 = q * s2
    return Bounds(
        E_single=cd * (s2 + mu2),
        Var_single=cd * (4 * mu2 * s2 + 2 * s2**2),
        E_lower=cd * (s2 / cfg.M + mu2),
        Var_lower=cd * (4 * mu2 * s2 / cfg.M + 2 * s2**2 / cfg.M**2),
        E_exact=cd * (ens_s2 + mu2),
        Var_exact=cd * (4 * mu2 * ens_s2 + 2 * ens_s2**2),
    )


@dataclass
class MomentEstimate:
    mean: float
    var: float
    se_mean: float
    se_var: float

    @classmethod
    def of(cls, x: np.ndarray) -> MomentEstimate:
        n = len(x)
        mean = float(np.mean(x))
        dev = x - mean
        var = float(np.sum(dev * dev) / (n - 1))
        m4 = float(np.mean(dev**4))
        # large-sample standard error of the sample variance
        se_var = float(np.sqrt(max(m4 - var**2, 0.0) / n))
        return cls(mean, var, float(np.sqrt(var / n)), se_var)

    def z_mean(self, target: float) -> float:
        return abs(self.mean - target) / self.se_mean if self.se_mean > 0 else (0.0 if self.mean == target else np.inf)

    def z_var(self, target: float) -> float:
        return abs(self.var - target) / self.se_var if self.se_var > 0 else (0.0 if self.var == target else np.inf)


@dataclass
class SimulationRecord:
    config: McConfig
    bounds: Bounds
    ensemble: MomentEstimate
    single: MomentEstimate
    checks: dict[str, bool] = field(default_factory=dict)
    sampler: str = SAMPLER

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def sample_frob_sq(cfg: McConfig, chunk: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Samples of ``||J_F||_F^2`` and ``||J_1||_F^2`` from ``cfg.samples`` draws.

    Each fixed-size chunk has its own child seed, so results do not depend on
    how chunks are scheduled.
    """
    n_chunks = -(-cfg.samples // chunk)
    children = np.random.SeedSequence(cfg.seed).spawn(n_chunks)
    c = cfg.c
    ens, single = [], []
    for k, child in enumerate(children):
        n = min(chunk, cfg.samples - k * chunk)
        rng = np.random.default_rng(child)
        a = cfg.mu + cfg.sigma * rng.standard_normal((n, cfg.M, cfg.C, cfg.D))
        jf = np.tensordot(a, c, axes=([1], [0]))  # n, C, D
        ens.append(np.sum(jf * jf, axis=(1, 2)))
        single.append(np.sum(a[:, 0] * a[:, 0], axis=(1, 2)))
    return np.concatenate(ens), np.concatenate(single)


def simulate_bounds(cfg: McConfig, bounds: Bounds | None = None) -> SimulationRecord:
    """Monte Carlo moments of both norms, checked against the analytic values.

    ``bounds`` may be supplied to test against altered reference values.
    """
    bounds = bounds or analytic_bounds(cfg)
    ens_x, single_x = sample_frob_sq(cfg)
    ens = MomentEstimate.of(ens_x)
    single = MomentEstimate.of(single_x)
    checks = {
        "ensemble_mean": ens.z_mean(bounds.E_exact) <= SE_BAND,
        "ensemble_var": ens.z_var(bounds.Var_exact) <= SE_BAND,
        "single_mean": single.z_mean(bounds.E_single) <= SE_BAND,
        "single_var": single.z_var(bounds.Var_single) <= SE_BAND,
    }
    if cfg.weights is None:
        checks["lower_mean_equality"] = ens.z_mean(bounds.E_lower) <= SE_BAND
        checks["lower_var_equality"] = ens.z_var(bounds.Var_lower) <= SE_BAND
    if cfg.M >= 2:
        checks["mean_below_single"] = ens.mean < single.mean
        checks["analytic_mean_below_single"] = bounds.E_exact < bounds.E_single
        checks["analytic_var_below_single"] = bounds.Var_exact < bounds.Var_single
    return SimulationRecord(cfg, bounds, ens, single, checks)


@dataclass
class SweepResult:
    rows: list[dict]
    passed: bool
    analytic_strictly_decreasing: bool

    def to_csv(self, header_comment: str | None = None) -> str:
        return _csv(self.rows, header_comment)


def monotonicity_sweep(cfg_base: McConfig, ms: Sequence[int]) -> SweepResult:
    """Analytic and simulated moments of ``||J_F||_F^2`` for uniform ensembles of each size."""
    ms = list(ms)
    if ms != sorted(ms) or len(set(ms)) != len(ms):
        raise ValueError("ensemble sizes must be strictly ascending")
    rows = []
    for m in ms:
        cfg = replace(cfg_base, M=m, weights=None)
        rec = simulate_bounds(cfg)
        b = rec.bounds
        rows.append({
            "M": m,
            "E_exact": b.E_exact,
            "Var_exact": b.Var_exact,
            "E_empirical": rec.ensemble.mean,
            "E_se": rec.ensemble.se_mean,
            "Var_empirical": rec.ensemble.var,
            "Var_se": rec.ensemble.se_var,
            "within_band": rec.ensemble.z_mean(b.E_exact) <= SE_BAND and rec.ensemble.z_var(b.Var_exact) <= SE_BAND,
        })
    e = [r["E_exact"] for r in rows]
    v = [r["Var_exact"] for r in rows]
    decreasing = all(a > b for a, b in zip(e, e[1:])) and all(a > b for a, b in zip(v, v[1:]))
    return SweepResult(rows, decreasing and all(r["within_band"] for r in rows), decreasing)


def _csv(rows: Sequence[dict], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def simulation_rows(rec: SimulationRecord) -> list[dict]:
    b = rec.bounds
    rows = []
    for name, est, e_ref, v_ref in (
        ("ensemble", rec.ensemble, b.E_exact, b.Var_exact),
        ("single", rec.single, b.E_single, b.Var_single),
    ):
        rows.append({
            "quantity": name,
            "E_analytic": e_ref,
            "E_empirical": est.mean,
            "E_se": est.se_mean,
            "Var_analytic": v_ref,
            "Var_empirical": est.var,
            "Var_se": est.se_var,
        })
    rows.append({
        "quantity": "lower_bound",
        "E_analytic": b.E_lower,
        "E_empirical": rec.ensemble.mean,
        "E_se": rec.ensemble.se_mean,
        "Var_analytic": b.Var_lower,
        "Var_empirical": rec.ensemble.var,
        "Var_se": rec.ensemble.se_var,
    })
    return rows


# ---------------------------------------------------------------- trained models

@dataclass
class FrobStats:
    mean: float
    var: float
    values: np.ndarray


def frob_sq_per_input(target, images: np.ndarray, chunk: int = 200) -> np.ndarray:
    """``||J_F(x)||_F^2`` of the aggregated logits for each row of ``images``."""
    ens = as_ensemble(target)
    if ens.aggregation != "logit_mean":
        raise UnsupportedAggregationError("Jacobian norms are taken on aggregated logits")
    out = []
    for start in range(0, len(images), chunk):
        graph = Graph()
        x = graph.leaf(images[start:start + chunk])
        out.append(batch_frob_sq(lambda z: ensemble_forward(ens, z), x, create_graph=False).data)
    return np.concatenate(out)


def empirical_model_frob(targets: Sequence, ds_test: Dataset, n_inputs: int) -> list[FrobStats]:
    """Mean and variance of ``||J_F||_F^2`` over the first ``n_inputs`` test inputs, per target."""
    if n_inputs < 1:
        raise ValueError("n_inputs must be >= 1")
    d = {as_ensemble(t).input_dim for t in targets}
    if len(d) > 1:
        raise ValueError("targets must share an input dimension")
    images = ds_test.images[:n_inputs]
    stats = []
    for t in targets:
        v = frob_sq_per_input(t, images)
        stats.append(FrobStats(float(np.mean(v)), float(np.var(v)), v))
    return stats


# ---------------------------------------------------------------- full suite

@dataclass
class TheorySuiteResult:
    weight_bounds: dict[int, bool]
    simulation: SimulationRecord
    sweep: SweepResult
    csv: dict[str, str]

    @property
    def passed(self) -> bool:
        return all(self.weight_bounds.values()) and self.simulation.passed and self.sweep.passed


def run_theory_suite(
    cfg: McConfig = McConfig(),
    sweep_ms: Sequence[int] = (1, 3, 6, 9),
    weight_ms: Sequence[int] = (2, 4, 8, 16),
    weight_n: int = 10_000,
    tamper_lower: float = 0.0,
    header_comment: str | None = None,
) -> TheorySuiteResult:
    """Weight-bound property check, one simulation and a sweep over ensemble sizes.

    ``tamper_lower`` inflates the reference lower bounds by that fraction; a
    uniform-weight simulation must then fail (negative control).
    """
    weight_bounds = weight_bound_check(weight_ms, weight_n, cfg.seed)
    bounds = analytic_bounds(cfg)
    if tamper_lower:
        bounds = replace(
            bounds,
            E_lower=bounds.E_lower * (1 + tamper_lower),
            Var_lower=bounds.Var_lower * (1 + tamper_lower),
        )
    sim = simulate_bounds(cfg, bounds)
    sweep = monotonicity_sweep(cfg, sweep_ms)
    meta = f"sampler={sim.sampler}"
    comment = f"{header_comment}; {meta}" if header_comment else meta
    csvs = {
        "theory_weights.csv": _csv([{"M": m, "n": weight_n, "holds": ok} for m, ok in weight_bounds.items()], comment),
        "theory_bounds.csv": _csv(simulation_rows(sim), comment),
        "theory_checks.csv": _csv([{"check": k, "passed": v} for k, v in sim.checks.items()], comment),
        "theory_monotonicity.csv": sweep.to_csv(comment),
    }
    return TheorySuiteResult(weight_bounds, sim, sweep, csvs)
