"""
Ensembles against universal perturbations
=========================================

Trains a plain model, a Jacobian-regularized model and a regularized
snapshot ensemble on the same synthetic data, then searches for the
worst-case universal perturbation against each one.
"""

from jens.attack import UapConfig, worst_case_uap
from jens.data import synthetic_blobs
from jens.ensemble import BUILDERS
from jens.evaluation import RobustnessReport, clean_accuracy, comparison_table
from jens.models import mlp
from jens.training import TrainConfig

# %% Data and architecture
train_set = synthetic_blobs(2000, 196, 10, seed=0, separation=0.3, spread=0.4)
test_set = synthetic_blobs(1000, 196, 10, seed=1, separation=0.3, spread=0.4)
arch = mlp(196, (256, 128), 10)

# %% Three models from one seed
models = {
    ("single", 1, 0.0): BUILDERS["single"](train_set, TrainConfig(epochs=8, lr=3e-3), 1, 0, arch),
    ("single", 1, 0.1): BUILDERS["single"](train_set, TrainConfig(epochs=8, lr=3e-3, lambda_jr=0.1), 1, 0, arch),
    ("snapshot", 3, 0.1): BUILDERS["snapshot"](train_set, TrainConfig(epochs=8, lr=3e-3, lambda_jr=0.1), 3, 0, arch),
}

# %% Worst-case perturbation over five attack seeds at two budgets
reports = []
for (method, m, lam), target in models.items():
    robust = {}
    for eps in (0.10, 0.15):
        p = worst_case_uap(target, train_set, test_set, UapConfig(eps, seeds=5))
        robust[eps] = 100.0 * (1.0 - p.success_rate)
        print(f"{method} M={m} lambda={lam} eps={eps}: success rate {p.success_rate:.3f} (seed {p.seed})")
    reports.append(RobustnessReport(method, m, lam, clean_accuracy(target, test_set), robust))

# %% Ranked by the average of clean and mean robust accuracy
print()
print(comparison_table(reports))
