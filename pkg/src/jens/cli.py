"""``jens`` command line: train, attack, eval, verify-theory and report.

Settings come from the built-in desk-scale defaults, then ``--full-scale``,
then an INI ``--config`` file, then individual flags; later sources win.

Exit codes: 0 ok, 1 usage, 2 data or missing artifact, 3 divergence,
4 verification failure. An attack whose every seed hits a non-finite
loss also exits with 3.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from ._io import atomic_write_text
from .attack import AttackError
from .data import DataError
from .experiment import (
    ConfigError, ExperimentConfig, MissingArtifactError, config_hash, full_scale,
    parse_overrides, read_config_file, run_attack, run_eval, run_report, run_train,
)
from .theory import McConfig, run_theory_suite

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4

# flag name -> ExperimentConfig field
EXPERIMENT_FLAGS = {
    "dataset": "dataset", "arch": "arch", "hidden": "hidden", "methods": "methods",
    "learners": "learners", "lambdas": "lambdas", "epsilons": "epsilons",
    "epochs": "epochs", "batch-size": "batch_size", "optimizer": "optimizer", "lr": "lr",
    "jacobian-mode": "jacobian_mode", "n-proj": "n_proj",
    "uap-seeds": "uap_seeds", "uap-iterations": "uap_iterations", "uap-batch": "uap_batch",
    "n-train": "n_train", "n-test": "n_test", "data-seed": "data_seed",
    "weighting": "weighting", "seed": "seed", "out": "out", "jobs": "jobs", "data-dir": "data_dir",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jens", description="Jacobian-regularized ensembles against universal perturbations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train every (method, M, lambda) grid point",
        "attack": "worst-case UAP per trained point and epsilon",
        "eval": "score stored perturbations and write report.csv / report.txt",
        "report": "eval outputs plus trade-off SVG and perturbation PNGs",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="INI file of key = value settings")
        p.add_argument("--full-scale", action="store_true", help="LeNet, MNIST, full grids, 50 attack seeds")
        for flag, field in EXPERIMENT_FLAGS.items():
            p.add_argument(f"--{flag}", dest=field, default=None, metavar=field.upper())

    t = sub.add_parser("verify-theory", help="Monte Carlo and exact-arithmetic checks of the ensemble bounds")
    t.add_argument("--M", type=int, default=5)
    t.add_argument("--C", type=int, default=4)
    t.add_argument("--D", type=int, default=6)
    t.add_argument("--mu", type=float, default=0.1)
    t.add_argument("--sigma", type=float, default=0.5)
    t.add_argument("--samples", type=int, default=100_000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sweep", default="1,3,6,9", help="ensemble sizes for the monotonicity sweep")
    t.add_argument("--weight-n", type=int, default=10_000)
    t.add_argument("--tamper", type=float, default=0.0, help="debug: inflate the lower bounds by this fraction")
    t.add_argument("--out", default="runs/theory")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if args.full_scale:
        values.update({k: v for k, v in vars(full_scale()).items()})
    if args.config:
        values.update(read_config_file(args.config))
    flags = {field: getattr(args, field) for field in EXPERIMENT_FLAGS.values() if getattr(args, field) is not None}
    values.update(parse_overrides(flags))
    return ExperimentConfig(**values)


def _print(msg: str) -> None:
    print(msg, flush=True)


def cmd_train(cfg: ExperimentConfig) -> int:
    res = run_train(cfg, _print)
    _print(f"trained {len(res.done)}, skipped {len(res.skipped)}, diverged {len(res.failed)}")
    return EXIT_DIVERGED if res.failed else EXIT_OK


def cmd_attack(cfg: ExperimentConfig) -> int:
    res = run_attack(cfg, _print)
    _print(f"attacked {len(res.done)}, skipped {len(res.skipped)}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig) -> int:
    _, _, table = run_eval(cfg)
    _print(table.rstrip())
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    run_report(cfg)
    _print(f"report written to {cfg.out}")
    return EXIT_OK


def cmd_verify_theory(args: argparse.Namespace) -> int:
    try:
        cfg = McConfig(M=args.M, C=args.C, D=args.D, mu=args.mu, sigma=args.sigma, samples=args.samples, seed=args.seed)
        sweep = tuple(int(m) for m in args.sweep.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    settings = {**vars(args)}
    settings.pop("command")
    settings.pop("out")
    digest = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]
    res = run_theory_suite(cfg, sweep, weight_n=args.weight_n, tamper_lower=args.tamper,
                           header_comment=f"config_hash={digest} master_seed={args.seed}")
    out = Path(args.out)
    for name, text in res.csv.items():
        atomic_write_text(out / name, text)
    for name, ok in res.simulation.checks.items():
        _print(f"{'PASS' if ok else 'FAIL'}  {name}")
    _print(f"{'PASS' if all(res.weight_bounds.values()) else 'FAIL'}  weight bounds, M in {list(res.weight_bounds)}")
    _print(f"{'PASS' if res.sweep.passed else 'FAIL'}  monotonicity sweep, M in {list(sweep)}")
    return EXIT_OK if res.passed else EXIT_VERIFY


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify-theory":
            return cmd_verify_theory(args)
        cfg = resolve_config(args)
        _print(f"# config_hash={config_hash(cfg)} master_seed={cfg.seed}")
        return COMMANDS[args.command](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"jens: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MissingArtifactError, FileNotFoundError) as exc:
        print(f"jens: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AttackError as exc:
        print(f"jens: attack diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
