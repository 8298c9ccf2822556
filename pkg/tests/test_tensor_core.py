import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gleason_mamba.core import (
    DifferentiableOp,
    DimensionError,
    GradCheckError,
    activation,
    activation_op,
    conv2d,
    conv2d_op,
    grad_check,
    linear,
    linear_op,
    normalize,
    normalize_op,
)


class TestLinear:
    def test_identity(self):
        np.testing.assert_array_equal(linear([1.0, 2.0], np.eye(2), np.zeros(2)), [1.0, 2.0])

    def test_zero_weight_returns_bias(self):
        np.testing.assert_array_equal(linear([3.0], [[0.0]], [5.0]), [5.0])

    def test_hand_dot_product(self):
        np.testing.assert_array_equal(linear([1.0, 2.0], [[1.0], [1.0]], [0.5]), [3.5])

    def test_shape_error_names_axes(self):
        with pytest.raises(DimensionError, match=r"last axis of x \(3\).*axis 0 of W \(2\)"):
            linear(np.ones(3), np.ones((2, 2)))

    def test_additive_in_x(self, rng):
        W, b = rng.standard_normal((5, 3)), rng.standard_normal(3)
        x1, x2 = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(linear(x1 + x2, W, b), linear(x1, W, b) + linear(x2, W, b) - b,
                                   rtol=0, atol=1e-12)


class TestConv2d:
    def test_identity_depthwise_1x1(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        np.testing.assert_array_equal(conv2d(x, np.ones((3, 1, 1)), "depthwise"), x)

    def test_identity_depthwise_3x3_delta(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, k, "depthwise"), x)

    def test_ones_kernel_on_constant_interior(self):
        v = 2.5
        y = conv2d(np.full((1, 1, 5, 5), v), np.ones((1, 3, 3)), "depthwise")
        assert y[0, 0, 2, 2] == 9 * v
        # zero padding: corner sees a 2x2 window
        assert y[0, 0, 0, 0] == 4 * v

    def test_pointwise_channel_sum(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        y = conv2d(x, [[1.0, 1.0]], "pointwise")
        np.testing.assert_allclose(y[:, 0], x[:, 0] + x[:, 1], atol=1e-15)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(np.ones((1, 3, 4, 4)), np.ones((2, 3, 3)), "depthwise")
        with pytest.raises(DimensionError):
            conv2d(np.ones((1, 3, 4, 4)), np.ones((2, 4)), "pointwise")

    def test_brute_force_depthwise(self, rng):
        x = rng.standard_normal((1, 2, 4, 5))
        k = rng.standard_normal((2, 3, 3))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(x)
        for c in range(2):
            for i in range(4):
                for j in range(5):
                    ref[0, c, i, j] = (xp[0, c, i:i + 3, j:j + 3] * k[c]).sum()
        np.testing.assert_allclose(conv2d(x, k, "depthwise"), ref, atol=1e-13)


class TestActivation:
    def test_relu_negative(self):
        assert activation(np.array(-1.0), "relu") == 0.0

    def test_silu_zero(self):
        assert activation(np.array(0.0), "silu") == 0.0

    def test_softplus_zero(self):
        assert activation(np.array(0.0), "softplus") == pytest.approx(math.log(2), abs=1e-15)

    def test_silu_definition(self, rng):
        x = rng.standard_normal(50) * 5
        np.testing.assert_allclose(activation(x, "silu"), x / (1 + np.exp(-x)), rtol=1e-14)

    def test_softplus_large_inputs_finite(self):
        y = activation(np.array([-800.0, 800.0]), "softplus")
        assert np.all(np.isfinite(y))
        assert y[1] == 800.0

    def test_unknown(self):
        with pytest.raises(ValueError):
            activation(np.zeros(1), "tanh")


class TestNormalize:
    def test_constant_input_gives_zeros(self):
        np.testing.assert_array_equal(normalize(np.full((2, 4), 3.0), "layer"), np.zeros((2, 4)))

    def test_layer_norm_hand(self):
        np.testing.assert_allclose(normalize([1.0, 3.0], "layer", eps=0.0), [-1.0, 1.0], atol=1e-15)

    def test_affine_recovery(self, rng):
        x = rng.standard_normal((3, 10))
        y = normalize(x, "layer", scale=np.full(10, 2.0), shift=np.full(10, 7.0))
        np.testing.assert_allclose(y.mean(axis=-1), 7.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.04, 100.0), kind=st.sampled_from(["layer", "batch"]))
    def test_standardized_moments(self, seed, scale, kind):
        x = np.random.default_rng(seed).standard_normal((4, 3, 5, 6)) * scale + 11.0
        y = normalize(x, kind)
        axes = (3,) if kind == "layer" else (0, 2, 3)
        assert np.abs(y.mean(axis=axes)).max() < 1e-9
        # eps shrinks the variance to s2 / (s2 + eps), visible for tiny rows
        s2 = x.var(axis=axes)
        assert np.abs(y.var(axis=axes) - s2 / (s2 + 1e-10)).max() < 1e-9

    def test_batch_norm_running_stats(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        y = normalize(x, "batch", mean=np.zeros(2), var=np.ones(2), eps=0.0)
        np.testing.assert_array_equal(y, x)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


class TestGradCheck:
    def test_linear(self, rng):
        assert grad_check(linear_op(), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3)),
                                        rng.standard_normal(3)]) < 1e-6

    def test_relu_away_from_kink(self, rng):
        assert grad_check(activation_op("relu"), [_away_from_zero(rng, (4, 5))]) < 1e-6

    def test_exp_at_zero(self):
        assert grad_check(activation_op("exp"), [np.zeros(1)]) < 1e-6

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("kind", ["relu", "silu", "softplus", "exp"])
    def test_activations_many_seeds(self, seed, kind):
        r = np.random.default_rng(seed)
        assert grad_check(activation_op(kind), [_away_from_zero(r, (3, 4))], seed=seed) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("mode", ["depthwise", "pointwise"])
    def test_conv_many_seeds(self, seed, mode):
        r = np.random.default_rng(seed)
        k = r.standard_normal((3, 3, 3)) if mode == "depthwise" else r.standard_normal((4, 3))
        b = r.standard_normal(3 if mode == "depthwise" else 4)
        assert grad_check(conv2d_op(mode), [r.standard_normal((2, 3, 4, 5)), k, b], seed=seed) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("kind", ["layer", "batch"])
    def test_norm_many_seeds(self, seed, kind):
        r = np.random.default_rng(seed)
        C = 4
        assert grad_check(normalize_op(kind), [r.standard_normal((3, C, 2, C)), r.standard_normal(C),
                                               r.standard_normal(C)], seed=seed) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_linear_many_seeds(self, seed):
        r = np.random.default_rng(seed)
        ins = [r.standard_normal((2, 4, 3)), r.standard_normal((3, 5)), r.standard_normal(5)]
        assert grad_check(linear_op(), ins, seed=seed) < 1e-4

    def test_detects_wrong_gradient(self, rng):
        bad = DifferentiableOp(lambda x: x ** 2, lambda ins, dy: (dy * ins[0],), "bad")
        assert grad_check(bad, [rng.standard_normal(5)]) > 0.1

    def test_non_finite_forward_aborts(self):
        op = DifferentiableOp(lambda x: np.log(x), lambda ins, dy: (dy / ins[0],), "log")
        with np.errstate(invalid="ignore"), pytest.raises(GradCheckError, match="non-finite"):
            grad_check(op, [np.array([-1.0, 1.0])])

    def test_eps_range(self):
        with pytest.raises(ValueError):
            grad_check(linear_op(), [np.ones((1, 1)), np.ones((1, 1)), np.ones(1)], eps=1e-2)

    def test_backward_shapes_and_linearity(self, rng):
        op = conv2d_op("depthwise")
        ins = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 3, 3)), rng.standard_normal(3)]
        u1, u2 = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
        g1, g2, g12 = op.backward(ins, u1), op.backward(ins, u2), op.backward(ins, 2 * u1 - u2)
        for a, b, c, x in zip(g1, g2, g12, ins):
            assert a.shape == x.shape
            np.testing.assert_allclose(c, 2 * a - b, atol=1e-12)
