"""Clean, robust, mean-UAP and weighted accuracy, plus ranked result tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .attack import Perturbation, UapConfig, robust_accuracy, worst_case_uap
from .data import Dataset
from .ensemble import as_ensemble, ensemble_forward
from .models import argmax_labels

EPSILON_GRID = (0.10, 0.15, 0.20, 0.25)
CSV_COLUMNS = (
    "method", "learners", "lambda_jr", "clean",
    "uap_010", "uap_015", "uap_020", "uap_025",
    "mean_uap", "weighted", "w",
)
METHOD_LABELS = {"single": "Single", "bagging": "Bagging", "snapshot": "Snapshot", "softvote": "Soft Voting"}


def eps_key(eps: float) -> str:
    return f"uap_{int(round(eps * 100)):03d}"


def weighted_accuracy(clean: float, mean_uap: float, w: float = 0.5) -> float:
    if not 0.0 <= w <= 1.0:
        raise ValueError("weighting must lie in [0, 1]")
    return w * clean + (1.0 - w) * mean_uap


def round_half_up(value: float, places: int = 1) -> str:
    """Decimal string of ``value`` rounded half away from zero at ``places`` digits.

    Works on the shortest repr of the float, so ``90.25`` becomes ``"90.3"``.
    """
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass
class RobustnessReport:
    method: str
    learners: int
    lambda_jr: float
    clean_acc: float
    robust_acc: dict[float, float] = field(default_factory=dict)
    weighting: float = 0.5

    def __post_init__(self):
        values = [self.clean_acc, *self.robust_acc.values()]
        if any(not 0.0 <= v <= 100.0 for v in values):
            raise ValueError("accuracies are percentages in [0, 100]")
        if not 0.0 <= self.weighting <= 1.0:
            raise ValueError("weighting must lie in [0, 1]")

    @property
    def mean_uap_acc(self) -> float:
        if not self.robust_acc:
            raise ValueError("no robust accuracies recorded")
        return float(np.mean(list(self.robust_acc.values())))

    @property
    def weighted_acc(self) -> float:
        return weighted_accuracy(self.clean_acc, self.mean_uap_acc, self.weighting)

    def csv_row(self) -> list[str]:
        by_key = {eps_key(e): v for e, v in self.robust_acc.items()}
        row = [self.method, str(self.learners), repr(float(self.lambda_jr)), repr(float(self.clean_acc))]
        row += [repr(float(by_key[k])) if k in by_key else "" for k in CSV_COLUMNS[4:8]]
        row += [repr(self.mean_uap_acc), repr(self.weighted_acc), repr(float(self.weighting))]
        return row


def percent(fraction: float, n: int) -> float:
    # back to an integer count first, so 0.86 of 100 prints as 86.0 rather than 86.00000000000001
    return 100.0 * round(fraction * n) / n


def clean_accuracy(target, ds_test: Dataset, chunk: int = 1000) -> float:
    """Percent of ``ds_test`` classified correctly."""
    if len(ds_test) == 0:
        raise ValueError("empty test set")
    ens = as_ensemble(target)
    correct = 0
    for start in range(0, len(ds_test), chunk):
        pred = argmax_labels(ensemble_forward(ens, ds_test.images[start:start + chunk]))
        correct += int(np.sum(pred == ds_test.labels[start:start + chunk]))
    return 100.0 * correct / len(ds_test)


def mean_uap_accuracy(
    target,
    ds_test: Dataset,
    ds_train: Dataset,
    uap_cfg_base: UapConfig,
    epsilons: Sequence[float] = EPSILON_GRID,
    base_seed: int = 0,
) -> tuple[dict[float, float], float, dict[float, Perturbation]]:
    """Robust accuracy (percent) under the worst-case UAP at each budget, and their mean."""
    if not epsilons:
        raise ValueError("empty epsilon grid")
    robust: dict[float, float] = {}
    found: dict[float, Perturbation] = {}
    for eps in epsilons:
        cfg = UapConfig(
            eps, uap_cfg_base.iterations, uap_cfg_base.batch_size, None,
            uap_cfg_base.seeds, uap_cfg_base.clip_inputs,
        )
        p = worst_case_uap(target, ds_train, ds_test, cfg, base_seed)
        found[eps] = p
        robust[eps] = percent(1.0 - p.success_rate, len(ds_test))
    return robust, float(np.mean(list(robust.values()))), found


def robust_from_perturbations(target, ds_test: Dataset, perturbations: dict[float, Perturbation], clip_inputs: bool = True) -> dict[float, float]:
    """Re-score stored perturbations without re-running the attack."""
    return {eps: percent(robust_accuracy(target, ds_test, p.delta, clip_inputs), len(ds_test)) for eps, p in sorted(perturbations.items())}


# ---------------------------------------------------------------- tables

def _lambda_label(lam: float) -> str:
    return "0" if lam == 0 else f"{lam:.2f}"


def rank(reports: Iterable[RobustnessReport]) -> list[RobustnessReport]:
    """Sorted by weighted accuracy, best first; ties keep input order."""
    return sorted(reports, key=lambda r: -r.weighted_acc)


def report_csv(reports: Sequence[RobustnessReport], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rank(reports):
        writer.writerow(r.csv_row())
    return buf.getvalue()


def format_table(rows: Sequence[tuple[str, RobustnessReport]], separator_after: int | None = None) -> str:
    header = ("Ensemble", "Learners", "λ_JR", "Clean", "Avg. UAP", "Weighted")
    body = [
        (label, str(r.learners), _lambda_label(r.lambda_jr), round_half_up(r.clean_acc),
         round_half_up(r.mean_uap_acc), round_half_up(r.weighted_acc))
        for label, r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    out = [line(header), "-" * len(line(header))]
    for i, cells in enumerate(body):
        if separator_after is not None and i == separator_after:
            out.append("-" * len(out[0]))
        out.append(line(cells))
    return "\n".join(out) + "\n"


def emit_report(reports: Sequence[RobustnessReport], header_comment: str | None = None) -> tuple[str, str]:
    """``(csv_text, table_text)`` for all reports, ranked by weighted accuracy."""
    if not reports:
        raise ValueError("no reports to emit")
    ranked = rank(reports)
    rows = [(METHOD_LABELS.get(r.method, r.method), r) for r in ranked]
    return report_csv(reports, header_comment), format_table(rows)


def categories(reports: Sequence[RobustnessReport]) -> dict[str, RobustnessReport]:
    """Best-of-category rows: JR only, ensemble only, and standard training."""
    ranked = rank(reports)
    picks = {
        "JR Only": [r for r in ranked if r.learners == 1 and r.lambda_jr > 0],
        "Ensemble Only": [r for r in ranked if r.learners > 1 and r.lambda_jr == 0],
        "Standard": [r for r in ranked if r.learners == 1 and r.lambda_jr == 0],
    }
    return {name: rows[0] for name, rows in picks.items() if rows}


def comparison_table(reports: Sequence[RobustnessReport], top_k: int = 3) -> str:
    """Top-``k`` rows by weighted accuracy, then the best of each ablation category."""
    ranked = rank(reports)
    top = [(METHOD_LABELS.get(r.method, r.method), r) for r in ranked[:top_k]]
    cats = categories(reports)
    tail = []
    for name, r in cats.items():
        label = METHOD_LABELS.get(r.method, r.method) if name == "Ensemble Only" else name
        tail.append((label, r))
    return format_table(top + tail, separator_after=len(top) if tail else None)
