"""Weighted accuracy, rounding, ranking, categories and report formatting."""
import csv
import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jens.attack import UapConfig
from jens.data import synthetic_blobs
from jens.evaluation import (
    CSV_COLUMNS,
    RobustnessReport,
    categories,
    clean_accuracy,
    comparison_table,
    emit_report,
    eps_key,
    mean_uap_accuracy,
    percent,
    rank,
    report_csv,
    round_half_up,
    weighted_accuracy,
)
from jens.models import ModelParams, mlp


def _report(method="single", m=1, lam=0.0, clean=90.0, uap=50.0, w=0.5):
    return RobustnessReport(method, m, lam, clean, {0.10: uap, 0.15: uap}, w)


class TestWeighted:
    def test_mean_of_clean_and_uap(self):
        assert weighted_accuracy(97.8, 82.8) == pytest.approx(90.3)

    def test_endpoints(self):
        assert weighted_accuracy(80.0, 20.0, 1.0) == 80.0
        assert weighted_accuracy(80.0, 20.0, 0.0) == 20.0

    def test_bad_weight(self):
        with pytest.raises(ValueError):
            weighted_accuracy(1.0, 1.0, 1.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1))
    def test_between_inputs(self, clean, uap, w):
        v = weighted_accuracy(clean, uap, w)
        assert min(clean, uap) - 1e-9 <= v <= max(clean, uap) + 1e-9

    def test_report_mean_uap(self):
        r = RobustnessReport("single", 1, 0.0, 90.0, {0.10: 40.0, 0.15: 30.0, 0.20: 20.0, 0.25: 10.0})
        assert r.mean_uap_acc == 25.0 and r.weighted_acc == 57.5

    def test_report_validation(self):
        with pytest.raises(ValueError):
            RobustnessReport("single", 1, 0.0, 101.0, {0.1: 50.0})
        with pytest.raises(ValueError):
            RobustnessReport("single", 1, 0.0, 90.0, {}).mean_uap_acc


class TestRounding:
    @pytest.mark.parametrize("value,text", [
        (90.25, "90.3"), (90.35, "90.4"), (65.5, "65.5"), (0.05, "0.1"), (63.549, "63.5"), (100.0, "100.0"),
    ])
    def test_half_up(self, value, text):
        assert round_half_up(value) == text

    def test_differs_from_bankers(self):
        # Python's round() would give 90.2 here
        assert round(90.25, 1) == 90.2 and round_half_up(90.25) == "90.3"

    def test_places(self):
        assert round_half_up(1.005, 2) == "1.01"

    def test_percent_from_count(self):
        assert repr(percent(1 - 0.86, 100)) == "14.0"


class TestRanking:
    def test_rank_by_weighted(self):
        rows = [_report(clean=c, uap=u) for c, u in ((90, 10), (80, 60), (70, 40))]
        assert [r.weighted_acc for r in rank(rows)] == [70.0, 55.0, 50.0]

    def test_ties_keep_input_order(self):
        a, b = _report("bagging", 3), _report("snapshot", 3)
        assert rank([a, b]) == [a, b] and rank([b, a]) == [b, a]

    def test_categories_by_enumeration(self):
        rng = np.random.default_rng(0)
        rows = [
            _report(method, m, lam, float(rng.uniform(50, 100)), float(rng.uniform(0, 50)))
            for method, m, lam in itertools.product(("bagging", "snapshot"), (1, 3, 6), (0.0, 0.1, 0.5))
        ]
        cats = categories(rows)

        def best(pred):
            return max((r for r in rows if pred(r)), key=lambda r: r.weighted_acc)

        assert cats["JR Only"] is best(lambda r: r.learners == 1 and r.lambda_jr > 0)
        assert cats["Ensemble Only"] is best(lambda r: r.learners > 1 and r.lambda_jr == 0)
        assert cats["Standard"] is best(lambda r: r.learners == 1 and r.lambda_jr == 0)

    def test_missing_category_omitted(self):
        assert set(categories([_report(m=3, lam=0.1)])) == set()

    def test_comparison_table_layout(self):
        rows = [
            _report("snapshot", 3, 0.5, 97.8, 82.8),
            _report("snapshot", 9, 0.5, 97.7, 82.3),
            _report("snapshot", 3, 0.2, 98.3, 81.5),
            _report("single", 1, 0.05, 98.4, 74.2),
            _report("bagging", 6, 0.0, 98.1, 42.8),
            _report("single", 1, 0.0, 99.1, 31.9),
        ]
        lines = comparison_table(rows).splitlines()
        assert lines[0].split()[:3] == ["Ensemble", "Learners", "λ_JR"]
        body = [ln.split() for ln in lines if not set(ln) <= {"-"}][1:]
        assert [b[0] for b in body] == ["Snapshot"] * 3 + ["JR", "Bagging", "Standard"]
        assert body[0][-1] == "90.3" and body[-1][-1] == "65.5"
        assert body[3][1:4] == ["Only", "1", "0.05"]
        # a rule separates the top three from the ablation rows
        assert set(lines[5]) == {"-"}


class TestCsv:
    def test_columns_and_header(self):
        text = report_csv([_report(), _report(lam=0.1, uap=60.0)], "config_hash=ab master_seed=3")
        lines = text.splitlines()
        assert lines[0] == "# config_hash=ab master_seed=3"
        rows = list(csv.reader(io.StringIO("\n".join(lines[1:]))))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert rows[1][2] == "0.1" and rows[1][CSV_COLUMNS.index("uap_020")] == ""
        assert float(rows[1][CSV_COLUMNS.index("weighted")]) == 75.0

    def test_eps_keys(self):
        assert [eps_key(e) for e in (0.10, 0.15, 0.20, 0.25)] == ["uap_010", "uap_015", "uap_020", "uap_025"]

    def test_emit_report_empty(self):
        with pytest.raises(ValueError):
            emit_report([])

    def test_emit_report_deterministic(self):
        rows = [_report(clean=91.0), _report("bagging", 3, 0.1, 88.0, 70.0)]
        assert emit_report(rows, "h") == emit_report(list(rows), "h")


class TestMeasured:
    def test_clean_accuracy_of_threshold_model(self):
        ds = synthetic_blobs(200, 4, 2, seed=0, separation=0.8, spread=0.05)
        w = np.zeros((4, 2))
        model = ModelParams(mlp(4, (), 2), [w, np.array([1.0, 0.0])])
        # a constant class-0 predictor is right on exactly half of a balanced set
        assert clean_accuracy(model, ds) == 50.0

    def test_mean_uap_accuracy(self):
        ds = synthetic_blobs(100, 4, 2, seed=0)
        model = ModelParams(mlp(4, (), 2), [np.zeros((4, 2)), np.array([1.0, 0.0])])
        robust, mean, found = mean_uap_accuracy(model, ds, ds, UapConfig(0.1, iterations=2, seeds=1), (0.1, 0.2))
        assert robust == {0.1: 50.0, 0.2: 50.0} and mean == 50.0 and set(found) == {0.1, 0.2}
