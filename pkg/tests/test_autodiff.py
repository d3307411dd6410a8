"""Autodiff primitives, backward passes and Jacobian helpers.

Every primitive is checked against central finite differences at first and
second order. Losses wrap each op in a weighted sum of squares so the
Hessian is non-zero even for linear ops.
"""
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jens.autodiff import (
    Graph,
    GraphMismatchError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    batch_frob_sq,
    batch_frob_sq_estimate,
    check_gradients,
    frob_sq,
    grad,
    jacobian_exact,
    jacobian_rows,
    ops,
    relative_error,
)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _sq_loss(out, w):
    return ops.sum(ops.multiply(ops.square(out), w))


# (name, input shapes, op on leaves). Inputs are drawn away from 0 to keep
# relu and clip kinks outside the finite-difference stencil.
PRIMITIVES = [
    ("add", [(3, 4), (3, 4)], lambda a, b: ops.add(a, b)),
    ("add_broadcast", [(3, 4), (4,)], lambda a, b: ops.add(a, b)),
    ("subtract", [(3, 4), (1, 4)], lambda a, b: ops.subtract(a, b)),
    ("multiply", [(3, 4), (3, 4)], lambda a, b: ops.multiply(a, b)),
    ("scale", [(5,)], lambda a: ops.scale(a, -2.5)),
    ("square", [(2, 3)], lambda a: ops.square(a)),
    ("exp", [(2, 3)], lambda a: ops.exp(a)),
    ("log", [(2, 3)], lambda a: ops.log(ops.square(a))),
    ("reciprocal", [(2, 3)], lambda a: ops.reciprocal(a)),
    ("relu", [(4, 5)], lambda a: ops.relu(a)),
    ("clip", [(4, 5)], lambda a: ops.clip(ops.scale(a, 0.5), -0.3, 0.3)),
    ("log_softmax", [(3, 5)], lambda a: ops.log_softmax(a)),
    ("softmax", [(3, 5)], lambda a: ops.softmax(a)),
    ("matmul", [(3, 4), (4, 2)], lambda a, b: ops.matmul(a, b)),
    ("transpose", [(2, 3, 4)], lambda a: ops.transpose(a, (2, 0, 1))),
    ("reshape", [(2, 6)], lambda a: ops.reshape(a, (3, 4))),
    ("flatten", [(2, 2, 3)], lambda a: ops.flatten(a)),
    ("sum", [(3, 4)], lambda a: ops.sum(a, axis=1)),
    ("sum_keepdims", [(3, 4)], lambda a: ops.sum(a, axis=0, keepdims=True)),
    ("mean", [(3, 4)], lambda a: ops.mean(a, axis=0)),
    ("sum_to", [(3, 4)], lambda a: ops.sum_to(a, (1, 4))),
    ("broadcast_to", [(1, 4)], lambda a: ops.broadcast_to(a, (3, 4))),
    ("gather_row", [(3, 5)], lambda a: ops.gather_row(a, [4, 0, 2])),
    ("scatter_row", [(3,)], lambda a: ops.scatter_row(a, [1, 0, 2], 4)),
    ("conv2d", [(2, 2, 6, 6), (3, 2, 3, 3)], lambda x, w: ops.conv2d(x, w)),
    ("avgpool2d", [(2, 1, 4, 4)], lambda a: ops.avgpool2d(a, 2)),
    ("unpool2d", [(2, 1, 2, 2)], lambda a: ops.unpool2d(a, 2)),
    ("im2col", [(1, 2, 4, 4)], lambda a: ops.im2col(a, 3)),
]


class TestPrimitiveExamples:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_matmul_identity(self):
        a = np.random.default_rng(1).standard_normal((3, 7))
        np.testing.assert_array_equal(ops.matmul(np.eye(3), a).data, a)

    def test_conv_of_ones(self):
        out = ops.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3))).data
        np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 9.0))

    def test_conv_matches_direct_loops(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        ref = np.zeros((2, 4, 4, 3))
        for i in range(4):
            for j in range(3):
                patch = x[:, :, i:i + 3, j:j + 3]
                ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w)
        np.testing.assert_allclose(ops.conv2d(x, w).data, ref, atol=1e-12)

    def test_col2im_is_adjoint_of_im2col(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 5, 5))
        cols = ops.im2col(x, 3).data
        y = rng.standard_normal(cols.shape)
        lhs = np.sum(cols * y)
        rhs = np.sum(x * ops.col2im(y, x.shape, 3).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_avgpool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.avgpool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_log_softmax_rows_normalize(self):
        x = np.random.default_rng(4).standard_normal((5, 7)) * 30
        np.testing.assert_allclose(np.exp(ops.log_softmax(x).data).sum(axis=1), 1.0, atol=1e-12)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,shapes,fn", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
    def test_first_and_second_order(self, name, shapes, fn):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        inputs = [_away_from_zero(rng, s) for s in shapes]
        w = rng.uniform(0.5, 1.5, size=fn(*inputs).shape)
        report = check_gradients(inputs, lambda leaves: _sq_loss(fn(*leaves), w), tol=1e-5, step=1e-4)
        assert report.passed, report

    def test_third_order_through_double_backward(self):
        # d/dx of d2/dx2 (x^3) = 6 everywhere
        g = Graph()
        x = g.leaf(np.array([0.7]))
        y = ops.sum(ops.multiply(ops.square(x), x))
        (g1,) = grad(y, [x], create_graph=True)
        (g2,) = grad(ops.sum(g1), [x], create_graph=True)
        (g3,) = grad(ops.sum(g2), [x])
        assert g1.data[0] == pytest.approx(3 * 0.49)
        assert g2.data[0] == pytest.approx(6 * 0.7)
        assert g3.data[0] == pytest.approx(6.0)


class TestBackward:
    def test_gradmap_covers_every_leaf(self):
        g = Graph()
        a, b, unused = g.leaves([np.ones((2, 2)), np.full(3, 2.0), np.zeros(4)])
        y = ops.add(ops.sum(ops.square(a)), ops.sum(b))
        gm = backward(y, [a, b, unused])
        assert set(gm) == {a.node, b.node, unused.node}
        assert all(gm[t.node].shape == t.shape for t in (a, b, unused))
        np.testing.assert_array_equal(gm[unused.node].data, 0.0)

    def test_gradients_are_graph_attached_with_create_graph(self):
        g = Graph()
        x = g.leaf(np.array([1.0, 2.0]))
        (gx,) = grad(ops.sum(ops.square(x)), [x], create_graph=True)
        assert gx.graph is g

    def test_non_scalar_output_rejected(self):
        g = Graph()
        x = g.leaf(np.ones(3))
        with pytest.raises(Exception, match="scalar"):
            backward(ops.square(x), [x])

    def test_mixed_graphs_rejected(self):
        a = Graph().leaf(np.ones(2))
        b = Graph().leaf(np.ones(2))
        with pytest.raises(GraphMismatchError):
            ops.add(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_detected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.nan]))
        with pytest.raises(NonFiniteError):
            ops.exp(np.array([1e4]))

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(5)
        g = Graph()
        w, x = g.leaves([rng.standard_normal((4, 3)), rng.standard_normal((6, 4))])
        y = ops.sum(ops.log_softmax(ops.relu(ops.matmul(x, w))))
        values = g.replay()
        assert all(np.array_equal(v, n.value) for v, n in zip(values, g.nodes))
        assert values[y.node].tobytes() == y.data.tobytes()

    def test_replay_with_new_leaf_values(self):
        g = Graph()
        x = g.leaf(np.array([1.0, 2.0]))
        y = ops.sum(ops.square(x))
        assert g.replay({x.node: np.array([3.0, 4.0])})[y.node] == pytest.approx(25.0)


class TestRelativeError:
    def test_scale_invariant(self):
        a = np.array([1.0, 2.0])
        b = np.array([1.0, 2.0 + 1e-6])
        assert relative_error(a, b) == pytest.approx(relative_error(1e6 * a, 1e6 * b))

    def test_zero(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestJacobian:
    def _mlp(self, rng, d=5, h=7, c=3):
        w1, w2 = rng.standard_normal((d, h)), rng.standard_normal((h, c))
        return lambda x: ops.matmul(ops.relu(ops.matmul(x, w1)), w2), (w1, w2)

    def test_exact_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        f, _ = self._mlp(rng)
        x = rng.standard_normal(5)
        jac = jacobian_exact(lambda z: f(ops.reshape(z, (1, 5))), x).data
        h = 1e-6
        fd = np.stack([
            (f((x + h * e)[None]).data - f((x - h * e)[None]).data)[0] / (2 * h) for e in np.eye(5)
        ], axis=1)
        np.testing.assert_allclose(jac, fd, atol=1e-6)

    def test_linear_map_jacobian_is_its_matrix(self):
        a = np.random.default_rng(7).standard_normal((5, 3))
        x = np.random.default_rng(8).standard_normal((4, 5))
        rows = jacobian_rows(lambda z: ops.matmul(z, a), x, create_graph=False)
        assert len(rows) == 3
        for c, row in enumerate(rows):
            np.testing.assert_allclose(row.data, np.broadcast_to(a[:, c], (4, 5)))
        np.testing.assert_allclose(batch_frob_sq(lambda z: ops.matmul(z, a), x, create_graph=False).data,
                                   np.sum(a**2))
        assert frob_sq(a).item() == pytest.approx(np.sum(a**2))

    def test_projection_estimator_is_unbiased(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((6, 4))
        # one input replicated; directions are drawn independently per row
        x = np.repeat(rng.standard_normal((1, 6)), 4000, axis=0)
        f = lambda z: ops.matmul(z, a)  # noqa: E731
        est = batch_frob_sq_estimate(f, x, 1, rng=np.random.default_rng(10), create_graph=False).data
        assert est.mean() == pytest.approx(np.sum(a**2), rel=0.05)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
    def test_frobenius_non_negative(self, a):
        x = np.ones((2, 3))
        assert np.all(batch_frob_sq(lambda z: ops.matmul(z, a), x, create_graph=False).data >= 0)
