import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecn.ops import (
    BatchNormState,
    ConvKernel,
    axis_grid,
    batchnorm,
    bilinear_resize,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    softmax_cross_entropy,
)
from ecn.tensor import Tensor, backward, precision, sum_all

from oracles import batchnorm_loops, bilinear_pixel, bilinear_pixel_lerp, conv2d_loops, linear_loops, pool_loops

ORACLE_TOL = dict(rtol=1e-12, atol=1e-12)


class TestConv:
    def test_identity_1x1(self, rng, f64):
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        k = ConvKernel(Tensor(np.eye(4).reshape(4, 4, 1, 1)))
        assert np.array_equal(conv2d(x, k).data, x.data)

    def test_centre_tap_3x3(self, rng, f64):
        x = Tensor(rng.standard_normal((2, 3, 5, 6)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        assert np.array_equal(conv2d(x, ConvKernel(Tensor(w))).data, x.data)

    def test_matches_loop_oracle(self, rng, f64):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        got = conv2d(Tensor(x), ConvKernel(Tensor(w))).data
        np.testing.assert_allclose(got, conv2d_loops(x, w), **ORACLE_TOL)

    @pytest.mark.parametrize("groups", [2, 4])
    def test_grouped_and_channelwise(self, rng, f64, groups):
        x = rng.standard_normal((2, 4, 4, 5))
        w = rng.standard_normal((4, 4 // groups, 3, 3))
        got = conv2d(Tensor(x), ConvKernel(Tensor(w), groups=groups)).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, groups=groups), **ORACLE_TOL)

    def test_spatial_size_preserved(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 7, 9)).astype(np.float32))
        assert conv2d(x, ConvKernel.create(3, 5, 3, rng)).shape == (1, 5, 7, 9)
        assert conv2d(x, ConvKernel.create(3, 5, 1, rng)).shape == (1, 5, 7, 9)

    def test_errors(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        with pytest.raises(ValueError):
            conv2d(x, ConvKernel.create(4, 4, 3, rng))
        with pytest.raises(ValueError):
            ConvKernel.create(3, 4, 3, rng, groups=2)

    def test_kernel_has_no_bias(self, rng):
        k = ConvKernel.create(16, 32, 3, rng)
        assert k.weight.data.size == 9 * 16 * 32


class TestBatchNorm:
    def test_standardised_input_passes_through(self, f64):
        base = np.array([-1.5, -0.5, 0.5, 1.5])
        x = np.tile(base, (1, 2, 1, 1)).reshape(1, 2, 1, 4)
        x = x / x.std()
        bn = BatchNormState.create(2, eps=0.0)
        np.testing.assert_allclose(batchnorm(Tensor(x), bn, True).data, x, atol=1e-12)

    def test_zero_gamma_gives_beta(self, rng, f64):
        bn = BatchNormState.create(3)
        bn.gamma.data[:] = 0
        bn.beta.data[:] = 5
        out = batchnorm(Tensor(rng.standard_normal((4, 3, 2, 2))), bn, True)
        assert np.all(out.data == 5.0)

    def test_output_statistics(self, rng, f64):
        bn = BatchNormState.create(4)
        bn.gamma.data[:] = rng.uniform(0.5, 2, 4)
        bn.beta.data[:] = rng.standard_normal(4)
        out = batchnorm(Tensor(rng.standard_normal((8, 4, 6, 6)) * 3 + 1), bn, True).data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, bn.beta.data, atol=1e-5)
        np.testing.assert_allclose(var, bn.gamma.data ** 2, rtol=1e-5, atol=1e-5)

    def test_running_statistics_update(self, rng, f64):
        bn = BatchNormState.create(2, momentum=0.1)
        x = rng.standard_normal((4, 2, 3, 3)) * 2 + 3
        batchnorm(Tensor(x), bn, True)
        m = 4 * 9
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        unbiased = x.var(axis=(0, 2, 3)) * m / (m - 1)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * unbiased, atol=1e-12)
        assert np.all(bn.running_var > 0)

    def test_eval_uses_running_statistics(self, rng, f64):
        bn = BatchNormState.create(3)
        bn.running_mean[:] = [1.0, -1.0, 0.5]
        bn.running_var[:] = [4.0, 1.0, 0.25]
        x = rng.standard_normal((2, 3, 3, 3))
        before = bn.running_mean.copy()
        got = batchnorm(Tensor(x), bn, False).data
        ref = batchnorm_loops(x, bn.gamma.data, bn.beta.data, bn.eps, bn.running_mean, bn.running_var)
        np.testing.assert_allclose(got, ref, **ORACLE_TOL)
        assert np.array_equal(bn.running_mean, before)

    def test_degenerate_batch_rejected(self):
        with pytest.raises(ValueError):
            batchnorm(Tensor(np.ones((1, 2, 1, 1), np.float32)), BatchNormState.create(2), True)

    def test_two_parameters_per_channel(self):
        bn = BatchNormState.create(7)
        assert bn.gamma.data.size + bn.beta.data.size == 14


class TestBilinear:
    def test_identity_grid(self, rng, f64):
        x = Tensor(rng.standard_normal((2, 3, 5, 7)))
        assert np.array_equal(bilinear_resize(x, (5, 7)).data, x.data)

    def test_ramp_4x4_to_3x3(self, f64):
        ramp = np.arange(16, dtype=np.float64).reshape(4, 4)
        got = bilinear_resize(Tensor(ramp.reshape(1, 1, 4, 4)), (3, 3)).data[0, 0]
        assert np.array_equal(got, bilinear_pixel_lerp(ramp, 3, 3))
        np.testing.assert_allclose(got, bilinear_pixel(ramp, 3, 3), **ORACLE_TOL)

    def test_matches_pixel_oracle(self, rng, f64):
        img = rng.standard_normal((7, 5))
        got = bilinear_resize(Tensor(img.reshape(1, 1, 7, 5)), (4, 3)).data[0, 0]
        assert np.array_equal(got, bilinear_pixel_lerp(img, 4, 3))
        np.testing.assert_allclose(got, bilinear_pixel(img, 4, 3), **ORACLE_TOL)

    def test_align_corners_endpoints(self, rng, f64):
        img = rng.standard_normal((1, 1, 5, 6))
        out = bilinear_resize(Tensor(img), (3, 4), align_corners=True).data
        for i, j in [(0, 0), (0, 3), (2, 0), (2, 3)]:
            assert out[0, 0, i, j] == img[0, 0, (0, 4)[i // 2], (0, 5)[j // 3]]

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 12), ow=st.integers(1, 12),
           value=st.floats(-1e3, 1e3, allow_nan=False), aligned=st.booleans())
    def test_constants_are_fixed_points(self, h, w, oh, ow, value, aligned):
        with precision("float64"):
            x = Tensor(np.full((1, 2, h, w), value))
            out = bilinear_resize(x, (oh, ow), align_corners=aligned).data
            assert np.all(out == value)

    @settings(max_examples=60, deadline=None)
    @given(n_in=st.integers(1, 40), n_out=st.integers(1, 40), aligned=st.booleans())
    def test_grid_weights(self, n_in, n_out, aligned):
        g = axis_grid(n_in, n_out, aligned)
        assert np.all(g.frac >= 0) and np.all(g.frac < 1)
        assert np.all(np.diff(g.coords) >= 0)
        m = g.matrix(n_in)
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)
        # four 2-D weights are products of the per-axis pairs and sum to one
        wy = np.stack([1 - g.frac, g.frac])
        assert np.allclose(np.einsum("ai,bj->ij", wy, wy), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(2, 9), w=st.integers(2, 9), oh=st.integers(1, 9), ow=st.integers(1, 9),
           seed=st.integers(0, 1000))
    def test_backward_conserves_mass(self, h, w, oh, ow, seed):
        with precision("float64"):
            x = Tensor(np.random.default_rng(seed).standard_normal((2, 2, h, w)), requires_grad=True)
            backward(sum_all(bilinear_resize(x, (oh, ow))))
            assert math.isclose(x.grad.sum(), 2 * 2 * oh * ow, rel_tol=1e-12)


class TestHeadAndLoss:
    def test_pool(self, rng, f64):
        assert np.all(global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5))).data == 2.5)
        x = rng.standard_normal((2, 3, 1, 1))
        assert np.array_equal(global_avg_pool(Tensor(x)).data, x)
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, pool_loops(x), **ORACLE_TOL)

    def test_linear(self, rng, f64):
        x = rng.standard_normal((3, 4, 1, 1))
        assert np.array_equal(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
        b = rng.standard_normal(5)
        out = linear(Tensor(x), Tensor(np.zeros((5, 4))), Tensor(b)).data
        assert np.array_equal(out.reshape(3, 5), np.tile(b, (3, 1)))
        w = rng.standard_normal((5, 4))
        np.testing.assert_allclose(linear(Tensor(x), Tensor(w), Tensor(b)).data,
                                   linear_loops(x, w, b), **ORACLE_TOL)
        with pytest.raises(ValueError):
            linear(Tensor(rng.standard_normal((3, 4, 2, 1))), Tensor(w), Tensor(b))

    def test_head_parameter_cost(self):
        # 64 -> 10 classifier with bias
        assert 64 * 10 + 10 == 650

    def test_uniform_logits_give_log_classes(self, f64):
        for c in (2, 10, 100):
            loss = softmax_cross_entropy(Tensor(np.zeros((4, c, 1, 1))), [0, 1, 0, 1]).item()
            assert math.isclose(loss, math.log(c), rel_tol=1e-12)

    def test_margin_drives_loss_to_zero(self, f64):
        losses = []
        for margin in (0.0, 1.0, 5.0, 20.0, 50.0):
            z = np.zeros((1, 3, 1, 1))
            z[0, 1] = margin
            losses.append(softmax_cross_entropy(Tensor(z), [1]).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-20

    def test_gradient_is_softmax_minus_onehot(self, rng, f64):
        z = Tensor(rng.standard_normal((3, 4, 1, 1)), requires_grad=True)
        labels = np.array([0, 3, 1])
        backward(softmax_cross_entropy(z, labels))
        p = np.exp(z.data.reshape(3, 4))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(3), labels] -= 1
        np.testing.assert_allclose(z.grad.reshape(3, 4), p / 3, atol=1e-15)

    def test_label_range_checked(self, f64):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3, 1, 1))), [0, 3])


class TestDropout:
    def test_identity_cases(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        assert dropout(x, 0.0, True, rng) is x
        assert dropout(x, 0.5, False, None) is x

    def test_statistics(self):
        x = Tensor(np.ones((1, 1, 1000, 1000), np.float32))
        out = dropout(x, 0.25, True, np.random.default_rng(7)).data
        zero_frac = np.mean(out == 0)
        assert abs(zero_frac - 0.25) <= 0.005
        assert abs(out.mean() - 1.0) <= 0.01
        assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.75)}

    def test_rate_validated(self, rng):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones((1, 1, 2, 2))), 1.0, True, rng)
