import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from axialseg import tensor as T
from axialseg.tensor import Graph, GraphError, NonFiniteError, Parameter, ShapeError, Tensor

from conftest import analytic_grads, max_rel_error, numeric_grad


class TestMatmul:
    def test_identity(self):
        b = np.array([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), b).data, b)

    def test_row_times_column(self):
        assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_zero_annihilates(self, rng):
        out = T.matmul(rng.standard_normal((3, 4)), np.zeros((4, 2)))
        assert not out.data.any()

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_rule(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))
        with Graph() as g:
            ta, tb = g.leaf(a), g.leaf(b)
            grads = g.backward(T.sum(T.mul(T.matmul(ta, tb), w)))
        np.testing.assert_allclose(grads[ta], w @ b.T, rtol=1e-14)
        np.testing.assert_allclose(grads[tb], a.T @ w, rtol=1e-14)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(T.softmax_lastdim([0.0, 0.0]).data, [0.5, 0.5])

    def test_ln2(self):
        # exp(ln 2) : exp(0) = 2 : 1
        np.testing.assert_allclose(T.softmax_lastdim([math.log(2.0), 0.0]).data, [2 / 3, 1 / 3], rtol=1e-15)

    @given(
        x=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-50, 50)),
        c=st.floats(-20, 20),
    )
    @settings(max_examples=60, deadline=None)
    def test_normalized_and_shift_invariant(self, x, c):
        s = T.softmax_lastdim(x).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax_lastdim(x + c).data, s, atol=1e-12)

    def test_large_inputs_stay_finite(self):
        s = T.softmax_lastdim([1000.0, 999.0, -1000.0]).data
        assert np.isfinite(s).all()


class TestConv2d:
    def test_pointwise_identity(self, rng):
        x = rng.standard_normal((1, 5, 6))
        out = T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_center_is_nine(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out.data[0, 1, 1] == 9.0
        # same padding: corners see four ones, edges six
        assert out.data[0, 0, 0] == 4.0 and out.data[0, 0, 1] == 6.0

    def test_stride_two_shape(self):
        assert T.conv2d(np.ones((2, 4, 4)), np.ones((3, 2, 3, 3)), stride=2).shape == (3, 2, 2)
        assert T.conv2d(np.ones((2, 5, 7)), np.ones((3, 2, 3, 3)), stride=2).shape == (3, 3, 4)

    def test_matches_direct_summation(self, rng):
        x = rng.standard_normal((2, 5, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = T.conv2d(x, w, b).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 5, 4))
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    ref[o, i, j] = b[o] + (w[o] * xp[:, i : i + 3, j : j + 3]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-13)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))

    @pytest.mark.parametrize("stride,k", [(1, 3), (2, 3), (1, 1), (2, 1)])
    def test_gradients(self, rng, stride, k):
        x, w, b = rng.standard_normal((2, 5, 6)), rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)
        wts = rng.standard_normal(T.conv2d(x, w, b, stride).shape)

        def f(x_, w_, b_):
            return float((T.conv2d(x_, w_, b_, stride).data * wts).sum())

        gx, gw, gb = analytic_grads(lambda a, c, d: T.mul(T.conv2d(a, c, d, stride), wts), x, w, b)
        assert max_rel_error(gx, numeric_grad(lambda v: f(v, w, b), x)) < 1e-7
        assert max_rel_error(gw, numeric_grad(lambda v: f(x, v, b), w)) < 1e-7
        assert max_rel_error(gb, numeric_grad(lambda v: f(x, w, v), b)) < 1e-7


class TestLayerNorm:
    def test_constant_channels_give_zero(self):
        out = T.layer_norm_channels(np.full((4, 2, 3), 7.5))
        assert not out.data.any()

    def test_plus_minus_one(self):
        x = np.array([1.0, -1.0]).reshape(2, 1, 1)
        # mean 0, var 1: output = x / sqrt(1 + 1e-5)
        expected = np.array([1.0, -1.0]) / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(T.layer_norm_channels(x).data.ravel(), expected, rtol=1e-15)

    def test_moments_per_position(self, rng):
        x = rng.standard_normal((6, 4, 5)) * 3 + 2
        y = T.layer_norm_channels(x, np.ones(6), np.zeros(6)).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
        # epsilon inside the root leaves variance at var/(var+eps), not exactly one
        var = x.var(axis=0)
        np.testing.assert_allclose(y.var(axis=0), var / (var + 1e-5), atol=1e-12)

    def test_gradients(self, rng):
        x, gain, bias = rng.standard_normal((4, 3, 2)), rng.standard_normal(4), rng.standard_normal(4)
        wts = rng.standard_normal((4, 3, 2))

        def f(x_, g_, b_):
            return float((T.layer_norm_channels(x_, g_, b_).data * wts).sum())

        gx, gg, gb = analytic_grads(lambda a, c, d: T.mul(T.layer_norm_channels(a, c, d), wts), x, gain, bias)
        assert max_rel_error(gx, numeric_grad(lambda v: f(v, gain, bias), x)) < 1e-6
        assert max_rel_error(gg, numeric_grad(lambda v: f(x, v, bias), gain)) < 1e-6
        assert max_rel_error(gb, numeric_grad(lambda v: f(x, gain, v), bias)) < 1e-6


class TestElementwise:
    def test_relu(self):
        assert T.relu([-1.0, 2.0]).data.tolist() == [0.0, 2.0]

    def test_sigmoid(self):
        assert T.sigmoid(0.0).item() == 0.5
        s = T.sigmoid([-800.0, 800.0]).data
        assert s[0] == 0.0 and s[1] == 1.0

    def test_upsample(self):
        out = T.upsample_nearest2x(np.array([[1.0, 2.0], [3.0, 4.0]])).data
        ref = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                ref[i, j] = [[1, 2], [3, 4]][i // 2][j // 2]
        np.testing.assert_array_equal(out, ref)

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(np.ones((2, 3)), np.ones((3, 2)))
        with pytest.raises(ShapeError):
            T.mul(np.ones((2, 3)), np.ones((4,)))

    @pytest.mark.parametrize(
        "op",
        [
            lambda a, b: T.add(a, b),
            lambda a, b: T.sub(a, b),
            lambda a, b: T.mul(a, b),
            lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
            lambda a, b: T.mul(T.relu(a), T.sigmoid(b)),
            lambda a, b: T.scalar_mul(T.upsample_nearest2x(T.mul(a, b)), -1.5),
            lambda a, b: T.log(T.add(T.mul(a, a), T.sigmoid(b))),
            lambda a, b: T.einsum("ij,kj->ik", a, b),
            lambda a, b: T.mul(T.softmax_lastdim(a), b),
            lambda a, b: T.take(T.mul(a, b), np.array([[0, 2], [1, 1]]), axis=0),
            lambda a, b: T.transpose(T.reshape(T.mul(a, b), (4, 3)), (1, 0)),
        ],
    )
    def test_gradients(self, rng, op):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        ga, gb = analytic_grads(op, a, b)

        def f(a_, b_):
            return float(op(a_, b_).data.sum())

        assert max_rel_error(ga, numeric_grad(lambda v: f(v, b), a)) < 1e-6
        assert max_rel_error(gb, numeric_grad(lambda v: f(a, v), b)) < 1e-6

    def test_einsum_broadcast_gradient(self, rng):
        # index w appears only in the first operand and is summed away
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5))
        op = lambda x, y: T.einsum("ijw,ik->jk", x, y)  # noqa: E731
        ga, gb = analytic_grads(op, a, b)
        assert max_rel_error(ga, numeric_grad(lambda v: float(op(v, b).data.sum()), a)) < 1e-7
        assert max_rel_error(gb, numeric_grad(lambda v: float(op(a, v).data.sum()), b)) < 1e-7


class TestBackward:
    def test_sum_gives_ones(self, rng):
        (g,) = analytic_grads(lambda x: x, rng.standard_normal((2, 3, 4)))
        np.testing.assert_array_equal(g, np.ones((2, 3, 4)))

    def test_square(self):
        (g,) = analytic_grads(lambda x: T.mul(x, x), np.array([3.0]))
        assert g.tolist() == [6.0]

    def test_untouched_parameter_is_zero(self):
        used, unused = Parameter([1.0, 2.0], "used"), Parameter([[1.0]], "unused")
        with Graph() as g:
            grads = g.backward(T.sum(T.mul(used, used)))
        assert grads[unused].tolist() == [[0.0]]
        assert grads[used].tolist() == [2.0, 4.0]

    def test_loss_gradient_is_one(self):
        with Graph() as g:
            x = g.leaf(2.0)
            loss = T.mul(x, 3.0)
            grads = g.backward(loss)
        assert grads[loss].item() == 1.0

    def test_frozen_parameter_is_constant(self):
        p = Parameter([1.0], "p", frozen=True)
        with Graph() as g:
            x = g.leaf([2.0])
            grads = g.backward(T.sum(T.mul(p, x)))
        assert len([n for n in g.nodes if n.op.startswith("param:")]) == 0
        assert grads[x].tolist() == [1.0]

    def test_errors(self):
        with Graph() as g:
            x = g.leaf([1.0, 2.0])
            with pytest.raises(GraphError, match="scalar"):
                g.backward(T.mul(x, 2.0))
            with pytest.raises(GraphError, match="not recorded"):
                g.backward(Tensor(1.0))
        with Graph() as other:
            y = other.leaf(1.0)
        with Graph() as g2:
            with pytest.raises(GraphError):
                T.mul(y, 2.0)

    def test_reverse_creation_order(self):
        with Graph() as g:
            x = g.leaf(1.0)
            y = T.mul(x, 2.0)
            z = T.add(y, x)
        assert x.node < y.node < z.node

    def test_nonfinite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.mul([np.inf], 1.0)
        with pytest.raises(NonFiniteError):
            T.log([-1.0])

    def test_forward_does_not_mutate_recorded_values(self, rng):
        x0 = rng.standard_normal((3, 3))
        with Graph() as g:
            x = g.leaf(x0)
            y = T.relu(x)
            snapshot = y.data.copy()
            T.add(y, 1.0)
            T.softmax_lastdim(y)
            assert not y.data.flags.writeable
        np.testing.assert_array_equal(y.data, snapshot)

    def test_deterministic(self, rng):
        x = rng.standard_normal((4, 5, 5))
        w = rng.standard_normal((4, 4, 3, 3))
        a = T.layer_norm_channels(T.conv2d(x, w)).data
        b = T.layer_norm_channels(T.conv2d(x, w)).data
        assert a.tobytes() == b.tobytes()


def test_flop_counter_counts_loop_bounds():
    with T.counting_flops() as c:
        with T.flop_stage("score"):
            T.matmul(np.ones((3, 4)), np.ones((4, 5)))
        T.einsum("nij,njk->nik", np.ones((2, 3, 4)), np.ones((2, 4, 6)))
    assert c["score"] == 60
    assert c["other"] == 2 * 3 * 4 * 6
    assert c.multiply_adds == 60 + 144
