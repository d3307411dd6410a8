"""Model specs, initialization, forward passes and the binary format."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jens.autodiff import Graph, check_gradients
from jens.models import (
    ArchSpec,
    ModelFormatError,
    ModelParams,
    argmax_labels,
    forward_logits,
    init_params,
    lenet,
    load_model,
    mlp,
    model_from_bytes,
    model_to_bytes,
    predict,
    save_model,
)

LENET_PARAM_COUNT = 44426


class TestSpecs:
    def test_lenet_param_count_regression(self):
        # 6*25+6 + 16*6*25+16 + 256*120+120 + 120*84+84 + 84*10+10
        assert lenet().param_count() == LENET_PARAM_COUNT

    def test_mlp_param_count(self):
        assert mlp(784, (256, 128), 10).param_count() == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10

    def test_lenet_rejects_small_images(self):
        with pytest.raises(ValueError):
            lenet(10, (1, 8, 8))

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            ArchSpec(tag="resnet")


class TestInit:
    def test_same_seed_same_params(self):
        a, b = init_params(mlp(20, (8,), 3), 7), init_params(mlp(20, (8,), 3), 7)
        assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))

    def test_different_seed_differs(self):
        a, b = init_params(mlp(20, (8,), 3), 1), init_params(mlp(20, (8,), 3), 2)
        assert not np.array_equal(a.params[0], b.params[0])

    def test_biases_zero(self):
        m = init_params(lenet(), 0)
        assert all(np.all(p == 0) for p in m.params if p.ndim == 1)

    def test_glorot_limit(self):
        w = init_params(mlp(300, (100,), 10), 0).params[0]
        assert np.max(np.abs(w)) <= np.sqrt(6 / 400)

    def test_shape_validation(self):
        spec = mlp(4, (3,), 2)
        with pytest.raises(ValueError):
            ModelParams(spec, [np.zeros((4, 3))])


class TestForward:
    def test_lenet_logit_shape(self):
        m = init_params(lenet(), 0)
        x = np.random.default_rng(0).uniform(size=(3, 784))
        assert forward_logits(m, x).shape == (3, 10)

    def test_zero_model_zero_logits(self):
        spec = mlp(5, (4,), 3)
        m = ModelParams(spec, [np.zeros(s) for s in spec.param_shapes()])
        np.testing.assert_array_equal(forward_logits(m, np.ones((2, 5))).data, 0.0)

    def test_hand_computed_mlp(self):
        spec = mlp(2, (2,), 2)
        w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
        b1 = np.array([0.0, 1.0])
        w2 = np.array([[1.0, 0.0], [-1.0, 3.0]])
        b2 = np.array([0.5, -0.5])
        m = ModelParams(spec, [w1, b1, w2, b2])
        # x = (1, 1): hidden = relu(3, 0.5) = (3, 0.5); logits = (3 - 0.5 + 0.5, 1.5 - 0.5)
        np.testing.assert_allclose(forward_logits(m, np.array([[1.0, 1.0]])).data, [[3.0, 1.0]])
        # x = (1, -1): hidden = relu(-1, -1.5) = 0
        np.testing.assert_allclose(forward_logits(m, np.array([[1.0, -1.0]])).data, [[0.5, -0.5]])

    def test_batch_independence(self):
        m = init_params(lenet(), 3)
        x = np.random.default_rng(1).uniform(size=(2, 784))
        both = forward_logits(m, x).data
        np.testing.assert_allclose(forward_logits(m, x[1:]).data[0], both[1], rtol=0, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.permutations(list(range(6))))
    def test_row_permutation_equivariance(self, perm):
        m = init_params(mlp(10, (6,), 4), 0)
        x = np.random.default_rng(2).uniform(size=(6, 10))
        np.testing.assert_array_equal(forward_logits(m, x[perm]).data, forward_logits(m, x).data[perm])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward_logits(init_params(mlp(5, (3,), 2)), np.ones((1, 6)))

    def test_lenet_gradients(self):
        m = init_params(lenet(3, (1, 16, 16)), 0)
        x = np.random.default_rng(4).uniform(size=(2, 256))

        def loss(leaves):
            from jens.autodiff import ops
            return ops.sum(ops.square(forward_logits(m, x, leaves)))

        report = check_gradients(m.params, loss, tol=1e-5, step=1e-5, max_entries=60)
        assert report.passed, report


class TestPredict:
    def test_argmax(self):
        assert argmax_labels(np.array([[0.1, 0.9, 0.2]]))[0] == 1

    def test_tie_goes_low(self):
        assert argmax_labels(np.array([[0.5, 0.5, 0.5]]))[0] == 0

    def test_predict_matches_forward(self):
        m = init_params(mlp(8, (5,), 4), 0)
        x = np.random.default_rng(5).uniform(size=(2500, 8))
        np.testing.assert_array_equal(predict(m, x), argmax_labels(forward_logits(m, x)))


class TestFormat:
    @pytest.mark.parametrize("spec", [mlp(12, (7, 5), 3), lenet()], ids=["mlp", "lenet"])
    def test_round_trip_bit_exact(self, spec, tmp_path):
        m = init_params(spec, 11)
        save_model(tmp_path / "m.jens", m)
        back = load_model(tmp_path / "m.jens")
        assert back.arch == m.arch
        assert all(a.tobytes() == b.tobytes() for a, b in zip(m.params, back.params))

    def test_bad_magic(self):
        raw = model_to_bytes(init_params(mlp(3, (2,), 2)))
        with pytest.raises(ModelFormatError):
            model_from_bytes(b"XXXX" + raw[4:])

    def test_truncated(self):
        raw = model_to_bytes(init_params(mlp(3, (2,), 2)))
        with pytest.raises(ModelFormatError):
            model_from_bytes(raw[:-3])

    def test_trailing_bytes(self):
        raw = model_to_bytes(init_params(mlp(3, (2,), 2)))
        with pytest.raises(ModelFormatError):
            model_from_bytes(raw + b"\0")

    def test_graph_leaves_override_params(self):
        m = init_params(mlp(3, (2,), 2), 0)
        g = Graph()
        leaves = g.leaves([np.zeros_like(p) for p in m.params])
        np.testing.assert_array_equal(forward_logits(m, np.ones((1, 3)), leaves).data, 0.0)
