"""Experiment configuration, hashing, grid expansion and the cached pipeline stages."""
import json
import shutil
import time

import numpy as np
import pytest

from jens.attack import load_perturbation
from jens.evaluation import RobustnessReport
from jens.experiment import (
    ConfigError,
    ExperimentConfig,
    GridPoint,
    Layout,
    MissingArtifactError,
    attack_hash,
    config_hash,
    config_to_ini,
    grid_points,
    full_scale,
    parse_overrides,
    point_hash,
    read_config_file,
    run_attack,
    run_eval,
    run_report,
    run_train,
    score,
    tradeoff_svg,
)

TINY = dict(
    methods=("single",), learners=(1,), lambdas=(0.0, 0.1), epsilons=(0.10, 0.15),
    epochs=1, hidden=(16,), n_train=200, n_test=100, synthetic_dim=64, uap_seeds=2, uap_iterations=10,
)


def _cfg(tmp_path, **kw):
    return ExperimentConfig(**{**TINY, "out": str(tmp_path / "run"), **kw})


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig()
        assert cfg.dataset == "synthetic" and cfg.methods == ("snapshot",)

    def test_full_scale(self):
        cfg = full_scale()
        assert cfg.arch == "lenet" and cfg.learners == (1, 3, 6, 9) and cfg.uap_seeds == 50
        assert cfg.lambdas == (0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)

    @pytest.mark.parametrize("bad", [
        dict(methods=()), dict(lambdas=()), dict(learners=(0,)), dict(lambdas=(-0.1,)),
        dict(methods=("boosting",)), dict(dataset="cifar"), dict(weighting=2.0), dict(jobs=0),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)

    def test_parse_overrides(self):
        out = parse_overrides({"lambdas": "0, 0.5", "learners": "1,3", "lr": "0.01", "batch-size": "32"})
        assert out == {"lambdas": (0.0, 0.5), "learners": (1, 3), "lr": 0.01, "batch_size": 32}

    def test_unknown_and_malformed(self):
        with pytest.raises(ConfigError):
            parse_overrides({"colour": "red"})
        with pytest.raises(ConfigError):
            parse_overrides({"epochs": "many"})

    def test_ini_round_trip(self, tmp_path):
        cfg = _cfg(tmp_path, lambdas=(0.0, 0.05, 0.1))
        path = tmp_path / "c.ini"
        path.write_text(config_to_ini(cfg, "x"))
        assert ExperimentConfig(**read_config_file(path)) == cfg

    def test_duplicate_key_across_sections(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[a]\nepochs = 2\n[b]\nepochs = 3\n")
        with pytest.raises(ConfigError):
            read_config_file(path)


class TestHashing:
    def test_hash_ignores_output_location(self, tmp_path):
        assert config_hash(_cfg(tmp_path)) == config_hash(_cfg(tmp_path, out="elsewhere", jobs=2))

    def test_hash_tracks_settings(self, tmp_path):
        assert config_hash(_cfg(tmp_path)) != config_hash(_cfg(tmp_path, lr=0.01))

    def test_point_hash_ignores_rest_of_grid(self, tmp_path):
        a = point_hash(_cfg(tmp_path), "single", 1, 0.1)
        b = point_hash(_cfg(tmp_path, lambdas=(0.1, 0.5), uap_seeds=9), "single", 1, 0.1)
        assert a == b and a != point_hash(_cfg(tmp_path, epochs=2), "single", 1, 0.1)

    def test_attack_hash_tracks_attack(self, tmp_path):
        cfg = _cfg(tmp_path)
        h = attack_hash(cfg, "single", 1, 0.1, 0.1)
        assert h != attack_hash(cfg, "single", 1, 0.1, 0.15)
        assert h != attack_hash(cfg.with_(uap_seeds=3), "single", 1, 0.1, 0.1)


class TestGrid:
    def test_product(self):
        cfg = ExperimentConfig(methods=("bagging", "snapshot"), learners=(1, 3), lambdas=(0.0, 0.1, 0.5))
        assert len(grid_points(cfg)) == 12

    def test_single_collapses_learners(self):
        cfg = ExperimentConfig(methods=("single",), learners=(1, 3, 6), lambdas=(0.0, 0.1))
        assert grid_points(cfg) == [GridPoint("single", 1, 0.0), GridPoint("single", 1, 0.1)]

    def test_keys(self):
        assert GridPoint("snapshot", 3, 0.05).key == "snapshot_M3_lam0.05"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = ExperimentConfig(**{**TINY, "out": str(root / "run")})
    train = run_train(cfg)
    attack = run_attack(cfg)
    reports = run_report(cfg)
    return cfg, train, attack, reports


class TestPipeline:
    def test_train_outputs(self, pipeline):
        cfg, train, _, _ = pipeline
        root = Layout(cfg.out).root
        assert sorted(train.done) == ["single_M1_lam0", "single_M1_lam0.1"]
        assert sorted(p.name for p in (root / "models").iterdir()) == sorted(train.done)
        assert len(list((root / "records").glob("*.csv"))) == 2

    def test_rerun_skips(self, pipeline):
        cfg, _, _, _ = pipeline
        again = run_train(cfg)
        assert again.done == [] and len(again.skipped) == 2
        assert run_attack(cfg).done == []

    def test_lambda_grid_change_trains_new_points_only(self, pipeline, tmp_path):
        cfg, _, _, _ = pipeline
        shutil.copytree(cfg.out, tmp_path / "copy")
        res = run_train(cfg.with_(lambdas=(0.0, 0.1, 0.5), out=str(tmp_path / "copy")))
        assert res.done == ["single_M1_lam0.5"] and len(res.skipped) == 2

    def test_perturbations(self, pipeline):
        cfg, _, attack, _ = pipeline
        files = sorted((Layout(cfg.out).root / "attacks").glob("*.uap"))
        assert len(attack.done) == 4 and len(files) == 4
        for path in files:
            p, _ = load_perturbation(path)
            assert np.max(np.abs(p.delta)) <= p.epsilon

    def test_manifest(self, pipeline):
        cfg, _, _, _ = pipeline
        manifest = json.loads((Layout(cfg.out).root / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(cfg) and manifest["master_seed"] == cfg.seed
        attacks = manifest["points"]["single_M1_lam0"]["attacks"]
        assert set(attacks) == {"uap_010", "uap_015"} and len(attacks["uap_010"]["per_seed_rates"]) == 2

    def test_every_text_output_carries_header(self, pipeline):
        cfg, _, _, _ = pipeline
        root = Layout(cfg.out).root
        head = f"config_hash={config_hash(cfg)} master_seed={cfg.seed}"
        texts = [root / "report.csv", root / "report.txt", root / "config.ini", *root.glob("records/*.csv")]
        assert all(head in p.read_text().splitlines()[0] for p in texts)
        assert head in (root / "tradeoff.svg").read_text()

    def test_report_files(self, pipeline):
        cfg, _, _, reports = pipeline
        root = Layout(cfg.out).root
        assert len(reports) == 2 and len(list((root / "figures").glob("*.png"))) == 4
        assert (root / "tradeoff.svg").read_text().startswith("<svg")

    def test_eval_deterministic(self, pipeline):
        cfg, _, _, _ = pipeline
        assert run_eval(cfg)[1:] == run_eval(cfg)[1:]

    def test_stale_perturbation_detected(self, pipeline):
        cfg, _, _, _ = pipeline
        with pytest.raises(MissingArtifactError):
            score(cfg.with_(uap_iterations=11))

    def test_missing_models(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            run_attack(_cfg(tmp_path))


class TestSmoke:
    def test_two_seed_attack_under_a_minute(self, tmp_path):
        cfg = _cfg(tmp_path, lambdas=(0.0,), epsilons=(0.10, 0.15, 0.20, 0.25), hidden=(256, 128),
                   synthetic_dim=196, n_train=2000, n_test=1000, uap_iterations=100, epochs=1)
        run_train(cfg)
        start = time.perf_counter()
        res = run_attack(cfg)
        assert len(res.done) == 4
        assert time.perf_counter() - start < 60


class TestSvg:
    def test_one_dot_per_report(self):
        rows = [RobustnessReport("single", 1, lam, 90.0 - lam, {0.1: 40.0 + lam}) for lam in (0.0, 1.0, 2.0)]
        svg = tradeoff_svg(rows, "t")
        assert svg.count("<circle") == 3 and "λ=2" in svg

    def test_single_point(self):
        svg = tradeoff_svg([RobustnessReport("single", 1, 0.0, 90.0, {0.1: 40.0})])
        assert "nan" not in svg
