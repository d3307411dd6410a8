"""Experiment grids: configuration, cache keys and the train/attack/eval pipeline.

Every grid point ``(method, M, lambda_jr)`` is trained, attacked and scored
independently. Artifacts are keyed by a hash of exactly the settings they
depend on, so rerunning a sweep skips anything already on disk and only
recomputes points whose settings changed.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._io import atomic_write_text
from .attack import UapConfig, load_perturbation, save_perturbation, save_perturbation_png, worst_case_uap
from .data import Dataset, load_named, subset, synthetic_blobs
from .ensemble import BUILDERS, METHODS, Ensemble, load_ensemble, save_ensemble
from .evaluation import (
    EPSILON_GRID, RobustnessReport, clean_accuracy, comparison_table, eps_key, percent,
    report_csv, robust_from_perturbations,
)
from .models import ArchSpec, lenet, mlp
from .theory import frob_sq_per_input
from .training import DivergenceError, TrainConfig

DATASETS = ("synthetic", "mnist", "fashion_mnist")
ARCHS = ("mlp", "lenet")
LAMBDA_GRID = (0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
LEARNER_GRID = (1, 3, 6, 9)
# settings that change where files go or how fast they are made, never what they contain
UNHASHED = ("out", "jobs", "data_dir")


class ConfigError(ValueError):
    """Invalid experiment configuration (a usage error)."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage ran before the stage it depends on."""


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    arch: str = "mlp"
    hidden: tuple[int, ...] = (256, 128)
    methods: tuple[str, ...] = ("snapshot",)
    learners: tuple[int, ...] = (1, 3)
    lambdas: tuple[float, ...] = (0.0, 0.1)
    epsilons: tuple[float, ...] = (0.10, 0.15)
    # training
    epochs: int = 8
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    jacobian_mode: str = "exact"
    n_proj: int = 1
    # attack
    uap_seeds: int = 5
    uap_iterations: int = 100
    uap_batch: int = 200
    # data; n_train / n_test of 0 mean the whole split
    n_train: int = 2000
    n_test: int = 1000
    synthetic_dim: int = 196
    synthetic_separation: float = 0.3
    synthetic_spread: float = 0.4
    data_seed: int = 0
    weighting: float = 0.5
    seed: int = 0
    out: str = "runs"
    jobs: int = 1
    data_dir: str = ""

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        if not (self.methods and self.learners and self.lambdas and self.epsilons):
            raise ConfigError("methods, learners, lambdas and epsilons must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if any(m < 1 for m in self.learners):
            raise ConfigError("learners must be >= 1")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError("lambda_jr values must be >= 0")
        if any(not 0 < e <= 1 for e in self.epsilons):
            raise ConfigError("epsilons must lie in (0, 1]")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not 0 <= self.weighting <= 1:
            raise ConfigError("weighting must lie in [0, 1]")
        try:
            self.train_config(0.0)
            self.uap_config(self.epsilons[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)

    def train_config(self, lambda_jr: float) -> TrainConfig:
        return TrainConfig(
            lambda_jr=lambda_jr, epochs=self.epochs, batch_size=self.batch_size,
            optimizer=self.optimizer, lr=self.lr, momentum=self.momentum,
            seed=self.seed, jacobian_mode=self.jacobian_mode, n_proj=self.n_proj,
        )

    def uap_config(self, eps: float) -> UapConfig:
        return UapConfig(eps, self.uap_iterations, self.uap_batch, None, self.uap_seeds)


def full_scale(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentConfig:
    """The full protocol: LeNet on MNIST, all three ensemble methods, 50 attack seeds."""
    return cfg.with_(
        dataset="mnist", arch="lenet", methods=("bagging", "snapshot", "softvote"),
        learners=LEARNER_GRID, lambdas=LAMBDA_GRID, epsilons=EPSILON_GRID,
        optimizer="sgd", lr=0.05, uap_seeds=50, n_train=0, n_test=0,
    )


# ---------------------------------------------------------------- config files

def _fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    default = getattr(ExperimentConfig(), name)
    text = text.strip()
    try:
        if isinstance(default, tuple):
            kind = int if name in ("hidden", "learners") else float if name in ("lambdas", "epsilons") else str
            return tuple(kind(t.strip()) for t in text.split(",") if t.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_overrides(pairs: dict[str, str]) -> dict:
    fields = _fields()
    out = {}
    for key, text in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in fields:
            raise ConfigError(f"unknown setting {key!r}")
        out[name] = _parse_value(name, text)
    return out


def read_config_file(path) -> dict:
    """``key = value`` pairs from any section of an INI file."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in pairs:
                raise ConfigError(f"setting {key!r} appears in more than one section")
            pairs[key] = value
    return parse_overrides(pairs)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_to_ini(cfg: ExperimentConfig, header_comment: str | None = None) -> str:
    lines = [f"# {header_comment}"] if header_comment else []
    lines.append("[experiment]")
    lines += [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- hashing

def _digest(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _hashed_settings(cfg: ExperimentConfig) -> dict:
    return {k: v for k, v in dataclasses.asdict(cfg).items() if k not in UNHASHED}


def config_hash(cfg: ExperimentConfig) -> str:
    return _digest(_hashed_settings(cfg))


_GRID_FIELDS = ("methods", "learners", "lambdas", "epsilons", "weighting")
_ATTACK_FIELDS = ("uap_seeds", "uap_iterations", "uap_batch")


def point_hash(cfg: ExperimentConfig, method: str, m: int, lambda_jr: float) -> str:
    """Depends on data, model and training settings and the grid point, not on the rest of the grid."""
    base = {k: v for k, v in _hashed_settings(cfg).items() if k not in _GRID_FIELDS + _ATTACK_FIELDS}
    return _digest({**base, "point": [method, m, float(lambda_jr)]})


def attack_hash(cfg: ExperimentConfig, method: str, m: int, lambda_jr: float, eps: float) -> str:
    attack = {k: getattr(cfg, k) for k in _ATTACK_FIELDS}
    return _digest({"model": point_hash(cfg, method, m, lambda_jr), **attack, "epsilon": float(eps)})


def header(cfg: ExperimentConfig) -> str:
    return f"config_hash={config_hash(cfg)} master_seed={cfg.seed}"


# ---------------------------------------------------------------- grid and data

@dataclass(frozen=True)
class GridPoint:
    method: str
    learners: int
    lambda_jr: float

    @property
    def key(self) -> str:
        return f"{self.method}_M{self.learners}_lam{self.lambda_jr:g}"


def grid_points(cfg: ExperimentConfig) -> list[GridPoint]:
    points = []
    for method in cfg.methods:
        for m in (1,) if method == "single" else cfg.learners:
            for lam in cfg.lambdas:
                p = GridPoint(method, m, float(lam))
                if p not in points:
                    points.append(p)
    return points


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        kw = dict(separation=cfg.synthetic_separation, spread=cfg.synthetic_spread)
        train = synthetic_blobs(cfg.n_train or 2000, cfg.synthetic_dim, 10, seed=cfg.data_seed, **kw)
        test = synthetic_blobs(cfg.n_test or 1000, cfg.synthetic_dim, 10, seed=cfg.data_seed + 1, name="synthetic-test", **kw)
        return train, test
    train = load_named(cfg.dataset, "train", cfg.data_dir or None)
    test = load_named(cfg.dataset, "test", cfg.data_dir or None)
    if cfg.n_train:
        train = subset(train, cfg.n_train, cfg.data_seed)
    if cfg.n_test:
        test = subset(test, cfg.n_test, cfg.data_seed + 1)
    return train, test


def arch_for(cfg: ExperimentConfig, ds: Dataset) -> ArchSpec:
    if cfg.arch == "lenet":
        return lenet(ds.class_count, (1, *ds.image_hw))
    return mlp(ds.dim, cfg.hidden, ds.class_count)


def build_point(cfg: ExperimentConfig, point: GridPoint, ds: Dataset, arch: ArchSpec) -> Ensemble:
    builder = BUILDERS[point.method]
    tcfg = cfg.train_config(point.lambda_jr)
    return builder(ds, tcfg, point.learners, cfg.seed, arch)


# ---------------------------------------------------------------- layout

class Layout:
    def __init__(self, out):
        self.root = Path(out)

    def model_dir(self, point: GridPoint) -> Path:
        return self.root / "models" / point.key

    def record(self, point: GridPoint, i: int, n: int) -> Path:
        suffix = f"_member{i:02d}" if n > 1 else ""
        return self.root / "records" / f"{point.key}{suffix}.csv"

    def perturbation(self, point: GridPoint, eps: float) -> Path:
        return self.root / "attacks" / f"{point.key}_{eps_key(eps)}.uap"

    def figure(self, point: GridPoint, eps: float) -> Path:
        return self.root / "figures" / f"{point.key}_{eps_key(eps)}.png"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _read_manifest(layout: Layout) -> dict:
    if layout.manifest.exists():
        return json.loads(layout.manifest.read_text())
    return {"points": {}}


def _write_manifest(layout: Layout, cfg: ExperimentConfig, manifest: dict) -> None:
    manifest["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in _hashed_settings(cfg).items()}
    manifest["config_hash"] = config_hash(cfg)
    manifest["master_seed"] = cfg.seed
    atomic_write_text(layout.manifest, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write_text(layout.root / "config.ini", config_to_ini(cfg, header(cfg)))


def _stored_hash(model_dir: Path) -> str | None:
    path = model_dir / "ensemble.json"
    if not path.exists():
        return None
    return json.loads(path.read_text()).get("point_hash")


# ---------------------------------------------------------------- stages

@dataclass
class StageResult:
    done: list[str]
    skipped: list[str]
    failed: dict[str, str]


def _train_job(args):
    cfg, point, ds, arch = args
    try:
        return point, build_point(cfg, point, ds, arch), None
    except DivergenceError as exc:
        return point, None, str(exc)


def _map(fn: Callable, tasks: list, jobs: int) -> list:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_train(cfg: ExperimentConfig, log: Callable[[str], None] = lambda s: None) -> StageResult:
    """Train every pending grid point; divergence is recorded per point and the sweep continues."""
    layout = Layout(cfg.out)
    ds_train, _ = load_datasets(cfg)
    arch = arch_for(cfg, ds_train)
    manifest = _read_manifest(layout)
    result = StageResult([], [], {})
    pending = []
    for point in grid_points(cfg):
        if _stored_hash(layout.model_dir(point)) == point_hash(cfg, point.method, point.learners, point.lambda_jr):
            result.skipped.append(point.key)
            log(f"skip  {point.key} (up to date)")
        else:
            pending.append(point)
    for point, ens, err in _map(_train_job, [(cfg, p, ds_train, arch) for p in pending], cfg.jobs):
        h = point_hash(cfg, point.method, point.learners, point.lambda_jr)
        entry = {"method": point.method, "learners": point.learners, "lambda_jr": point.lambda_jr, "point_hash": h}
        if ens is None:
            result.failed[point.key] = err
            manifest["points"][point.key] = {**entry, "status": "diverged", "error": err}
            log(f"FAIL  {point.key}: {err}")
            continue
        for i, rec in enumerate(ens.records):
            atomic_write_text(layout.record(point, i, len(ens.records)), rec.to_csv(f"{header(cfg)} point_hash={h}"))
        save_ensemble(layout.model_dir(point), ens, {
            "point_hash": h, "config_hash": config_hash(cfg), "master_seed": cfg.seed,
            "lambda_jr": point.lambda_jr,
        })
        manifest["points"][point.key] = {**entry, "status": "trained"}
        result.done.append(point.key)
        log(f"train {point.key}")
    _write_manifest(layout, cfg, manifest)
    return result


def _load_point(cfg: ExperimentConfig, layout: Layout, point: GridPoint) -> Ensemble:
    model_dir = layout.model_dir(point)
    stored = _stored_hash(model_dir)
    if stored is None:
        raise MissingArtifactError(f"no trained model for {point.key}; run train first")
    if stored != point_hash(cfg, point.method, point.learners, point.lambda_jr):
        raise MissingArtifactError(f"model for {point.key} was trained under other settings; rerun train")
    return load_ensemble(model_dir)


def _attack_job(args):
    cfg, point, eps, ens, ds_train, ds_test = args
    return point, eps, worst_case_uap(ens, ds_train, ds_test, cfg.uap_config(eps), base_seed=cfg.seed)


def _perturbation_current(path: Path, expected: str) -> bool:
    if not path.exists():
        return False
    try:
        return load_perturbation(path)[1] == expected
    except ValueError:
        return False


def run_attack(cfg: ExperimentConfig, log: Callable[[str], None] = lambda s: None) -> StageResult:
    """Worst-case UAP for every (trained point, epsilon) pair not already on disk."""
    layout = Layout(cfg.out)
    ds_train, ds_test = load_datasets(cfg)
    manifest = _read_manifest(layout)
    result = StageResult([], [], {})
    tasks = []
    for point in grid_points(cfg):
        ens = _load_point(cfg, layout, point)
        for eps in cfg.epsilons:
            h = attack_hash(cfg, point.method, point.learners, point.lambda_jr, eps)
            name = f"{point.key}_{eps_key(eps)}"
            if _perturbation_current(layout.perturbation(point, eps), h):
                result.skipped.append(name)
                log(f"skip   {name} (up to date)")
            else:
                tasks.append((cfg, point, eps, ens, ds_train, ds_test))
    for point, eps, p in _map(_attack_job, tasks, cfg.jobs):
        h = attack_hash(cfg, point.method, point.learners, point.lambda_jr, eps)
        save_perturbation(layout.perturbation(point, eps), p, h)
        entry = manifest["points"].setdefault(point.key, {})
        entry.setdefault("attacks", {})[eps_key(eps)] = {
            "attack_hash": h, "seed": p.seed, "success_rate": p.success_rate,
            "per_seed_rates": {str(k): v for k, v in p.meta["per_seed_rates"].items()},
            "failed_seeds": {str(k): v for k, v in p.meta["failed_seeds"].items()},
        }
        name = f"{point.key}_{eps_key(eps)}"
        result.done.append(name)
        log(f"attack {name}: success rate {p.success_rate:.4f} (seed {p.seed})")
    _write_manifest(layout, cfg, manifest)
    return result


def score(cfg: ExperimentConfig) -> list[RobustnessReport]:
    """Re-score stored models against stored perturbations; nothing is retrained or re-attacked."""
    layout = Layout(cfg.out)
    _, ds_test = load_datasets(cfg)
    reports = []
    for point in grid_points(cfg):
        ens = _load_point(cfg, layout, point)
        found = {}
        for eps in cfg.epsilons:
            path = layout.perturbation(point, eps)
            if not path.exists():
                raise MissingArtifactError(f"no perturbation at {path}; run attack first")
            p, tag = load_perturbation(path)
            if tag != attack_hash(cfg, point.method, point.learners, point.lambda_jr, eps):
                raise MissingArtifactError(f"perturbation {path.name} is stale; rerun attack")
            found[eps] = p
        robust = robust_from_perturbations(ens, ds_test, found)
        reports.append(RobustnessReport(
            point.method, point.learners, point.lambda_jr, clean_accuracy(ens, ds_test), robust, cfg.weighting,
        ))
    return reports


def run_eval(cfg: ExperimentConfig) -> tuple[list[RobustnessReport], str, str]:
    """Write ``report.csv`` and ``report.txt``; returns the reports and both texts."""
    layout = Layout(cfg.out)
    reports = score(cfg)
    csv_text = report_csv(reports, header(cfg))
    table = f"# {header(cfg)}\n" + comparison_table(reports)
    atomic_write_text(layout.root / "report.csv", csv_text)
    atomic_write_text(layout.root / "report.txt", table)
    return reports, csv_text, table


def tradeoff_svg(reports: Sequence[RobustnessReport], title: str = "") -> str:
    """Scatter of clean accuracy against mean UAP accuracy, one labelled dot per grid point."""
    w, h, pad = 640, 480, 60
    xs = [r.clean_acc for r in reports]
    ys = [r.mean_uap_acc for r in reports]
    x0, x1 = min(xs) - 2, max(xs) + 2
    y0, y1 = min(ys) - 2, max(ys) + 2

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(v):
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="24" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 20}" text-anchor="middle" font-size="12">clean accuracy (%)</text>',
        f'<text x="16" y="{h / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {h / 2})">mean UAP accuracy (%)</text>',
    ]
    for v in np.linspace(x0, x1, 5):
        parts.append(f'<text x="{sx(v):.1f}" y="{h - pad + 16}" text-anchor="middle" font-size="10">{v:.1f}</text>')
    for v in np.linspace(y0, y1, 5):
        parts.append(f'<text x="{pad - 6}" y="{sy(v):.1f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    for r in reports:
        label = f"{r.method} M={r.learners} λ={r.lambda_jr:g}"
        parts.append(f'<circle cx="{sx(r.clean_acc):.1f}" cy="{sy(r.mean_uap_acc):.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{sx(r.clean_acc) + 6:.1f}" y="{sy(r.mean_uap_acc) - 6:.1f}" font-size="10">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_report(cfg: ExperimentConfig) -> list[RobustnessReport]:
    """Eval outputs plus a trade-off plot and one image per stored perturbation."""
    layout = Layout(cfg.out)
    reports, _, _ = run_eval(cfg)
    _, ds_test = load_datasets(cfg)
    atomic_write_text(layout.root / "tradeoff.svg", tradeoff_svg(reports, header(cfg)))
    for point in grid_points(cfg):
        for eps in cfg.epsilons:
            p, _ = load_perturbation(layout.perturbation(point, eps))
            save_perturbation_png(layout.figure(point, eps), p, ds_test.image_hw)
    return reports


# ---------------------------------------------------------------- paired directional trial

@dataclass
class TrialOutcome:
    seed: int
    frob_plain: float
    frob_jr: float
    robust_plain: dict[float, float]
    robust_jr: dict[float, float]
    weighted_plain: float
    weighted_jr: float
    weighted_snapshot_jr: float

    @property
    def frob_ratio(self) -> float:
        return self.frob_jr / self.frob_plain


def paired_trial(cfg: ExperimentConfig, seed: int, lambda_jr: float = 0.1, snapshot_m: int = 3, n_frob: int = 200) -> TrialOutcome:
    """One seed of the plain-vs-JR-vs-JR-snapshot comparison on fresh data.

    All three models share the seed, the data draw and the attack budget.
    """
    cfg = cfg.with_(seed=seed, data_seed=seed)
    ds_train, ds_test = load_datasets(cfg)
    arch = arch_for(cfg, ds_train)
    plain = BUILDERS["single"](ds_train, cfg.train_config(0.0), 1, seed, arch)
    jr = BUILDERS["single"](ds_train, cfg.train_config(lambda_jr), 1, seed, arch)
    snap = BUILDERS["snapshot"](ds_train, cfg.train_config(lambda_jr), snapshot_m, seed, arch)
    weighted, robust = [], []
    for ens in (plain, jr, snap):
        rates = {}
        for eps in cfg.epsilons:
            p = worst_case_uap(ens, ds_train, ds_test, cfg.uap_config(eps), base_seed=seed)
            rates[eps] = percent(1.0 - p.success_rate, len(ds_test))
        r = RobustnessReport("x", 1, 0.0, clean_accuracy(ens, ds_test), rates, cfg.weighting)
        robust.append(rates)
        weighted.append(r.weighted_acc)
    x = ds_test.images[:n_frob]
    return TrialOutcome(
        seed,
        float(np.mean(frob_sq_per_input(plain, x))),
        float(np.mean(frob_sq_per_input(jr, x))),
        robust[0], robust[1], weighted[0], weighted[1], weighted[2],
    )
