import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deanet import ops
from deanet.deconv import (
    BRANCH_WEIGHT_SHAPES,
    BRANCHES,
    EQUIVALENT_KERNEL,
    DEConvParams,
    deconv_forward_fused,
    deconv_forward_merged,
    deconv_forward_unfused,
    equivalent_kernel_adc,
    equivalent_kernel_cdc,
    equivalent_kernel_hdc,
    equivalent_kernel_vdc,
    reparameterize,
)
from deanet.gradcheck import run_suite
from deanet.tensor import ConvSpec, DimensionError, Tensor

from oracles import adc_pairs, cdc_pairs, hdc_pairs, pair_conv, vdc_pairs

SOBEL_H = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], np.float32)
PREWITT_H = np.array([[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]], np.float32)


def spec(c_in, c_out):
    return ConvSpec(c_in, c_out, 3, 3, padding=1)


def conv(x, k):
    return ops.conv2d(Tensor(x), Tensor(k), None, spec(k.shape[1], k.shape[0])).data


class TestEquivalentKernels:
    def test_cdc_uniform_weights(self):
        k = equivalent_kernel_cdc(np.full((1, 1, 3, 3), 0.5, np.float32)).data[0, 0]
        np.testing.assert_array_equal(k, 0.5 * np.array([[1, 1, 1], [1, -8, 1], [1, 1, 1]]))

    @pytest.mark.parametrize("branch", ["cdc", "adc", "hdc", "vdc"])
    def test_zero_weights_give_zero_kernel(self, branch):
        w = np.zeros((2, 3) + BRANCH_WEIGHT_SHAPES[branch], np.float32)
        assert not EQUIVALENT_KERNEL[branch](w).data.any()

    def test_adc_equal_ring_weights_cancel(self):
        assert not equivalent_kernel_adc(np.full((1, 1, 8), 1.7, np.float32)).data.any()

    def test_adc_first_ring_weight(self):
        w = np.zeros((1, 1, 8), np.float32)
        w[0, 0, 0] = 1
        k = equivalent_kernel_adc(w).data[0, 0]
        expected = np.zeros((3, 3))
        expected[0, 0], expected[0, 1] = 1, -1
        np.testing.assert_array_equal(k, expected)

    def test_sobel_and_prewitt_special_cases(self):
        sobel_pairs = np.array([[1, 1], [2, 2], [1, 1]], np.float32)[None, None]
        prewitt_pairs = np.ones((1, 1, 3, 2), np.float32)
        np.testing.assert_array_equal(equivalent_kernel_hdc(sobel_pairs).data[0, 0], SOBEL_H)
        np.testing.assert_array_equal(equivalent_kernel_hdc(prewitt_pairs).data[0, 0], PREWITT_H)
        np.testing.assert_array_equal(equivalent_kernel_vdc(sobel_pairs.transpose(0, 1, 3, 2)).data[0, 0], SOBEL_H.T)
        np.testing.assert_array_equal(equivalent_kernel_vdc(np.ones((1, 1, 2, 3), np.float32)).data[0, 0], PREWITT_H.T)

    def test_scharr_is_also_reachable(self):
        w = np.array([[3, 3], [10, 10], [3, 3]], np.float32)[None, None]
        np.testing.assert_array_equal(equivalent_kernel_hdc(w).data[0, 0], [[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_zero_sum_structure(self, seed):
        rng = np.random.default_rng(seed)
        for b in ("cdc", "adc", "hdc", "vdc"):
            w = rng.standard_normal((3, 2) + BRANCH_WEIGHT_SHAPES[b]).astype(np.float32)
            k = EQUIVALENT_KERNEL[b](w).data.astype(np.float64)
            assert np.abs(k.sum(axis=(2, 3))).max() <= 1e-6
        hk = equivalent_kernel_hdc(rng.standard_normal((3, 2, 3, 2))).data
        vk = equivalent_kernel_vdc(rng.standard_normal((3, 2, 2, 3))).data
        assert np.abs(hk.sum(axis=3)).max() <= 1e-6  # rows
        assert np.abs(vk.sum(axis=2)).max() <= 1e-6  # columns

    @pytest.mark.parametrize(
        "branch,oracle",
        [("cdc", cdc_pairs), ("adc", adc_pairs), ("hdc", hdc_pairs), ("vdc", vdc_pairs)],
    )
    def test_matches_pixel_pair_oracle(self, rng, branch, oracle):
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3) + BRANCH_WEIGHT_SHAPES[branch]).astype(np.float32)
        got = conv(x, EQUIVALENT_KERNEL[branch](w).data)
        assert np.abs(got - pair_conv(x, oracle(w))).max() <= 1e-5

    def test_wrong_weight_shape_rejected(self):
        with pytest.raises(DimensionError):
            equivalent_kernel_hdc(np.zeros((1, 1, 2, 3), np.float32))


class TestForward:
    def test_only_vc_equals_plain_conv(self, rng):
        p = DEConvParams.zeros(3, 4)
        p.vc.data[:] = rng.standard_normal(p.vc.shape)
        p.bias.data[:] = rng.standard_normal(4)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        ref = ops.conv2d(Tensor(x), p.vc, p.bias, spec(3, 4)).data
        np.testing.assert_array_equal(deconv_forward_unfused(Tensor(x), p).data, ref)
        assert np.array_equal(reparameterize(p).kernel.data, p.vc.data)

    def test_constant_input_gives_bias_on_interior(self, rng):
        p = DEConvParams.random(3, 4, rng)
        p.vc.data[:] = 0
        y = deconv_forward_unfused(Tensor(np.full((1, 3, 8, 8), 0.7, np.float32)), p).data
        interior = y[:, :, 1:-1, 1:-1] - p.bias.data.reshape(1, -1, 1, 1)
        assert np.abs(interior).max() <= 1e-6

    def test_zero_fused_kernel_gives_bias(self, rng):
        f = reparameterize(DEConvParams.zeros(2, 2))
        f.bias.data[:] = [0.25, -1.0]
        y = deconv_forward_fused(Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32)), f).data
        np.testing.assert_array_equal(y[0, 0], 0.25)
        np.testing.assert_array_equal(y[0, 1], -1.0)

    def test_delta_vc_gives_x_plus_bias(self, rng):
        p = DEConvParams.zeros(2, 2)
        p.vc.data[[0, 1], [0, 1], 1, 1] = 1
        p.bias.data[:] = 0.5
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(deconv_forward_fused(Tensor(x), reparameterize(p)).data, x + np.float32(0.5))

    @pytest.mark.parametrize("c", [4, 8, 16])
    def test_fused_equals_unfused(self, c):
        rng = np.random.default_rng(c)
        for _ in range(20):
            p = DEConvParams.random(c, c, rng)
            x = Tensor(rng.standard_normal((1, c, 8, 8)).astype(np.float32))
            diff = np.abs(deconv_forward_unfused(x, p).data - deconv_forward_fused(x, reparameterize(p)).data)
            assert diff.max() <= 1e-5

    def test_fused_equals_unfused_f64(self, rng):
        p = DEConvParams.random(4, 4, rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)))
        diff = np.abs(deconv_forward_unfused(x, p).data - deconv_forward_fused(x, reparameterize(p)).data)
        assert diff.max() <= 1e-10

    def test_merged_matches_unfused(self, rng):
        p = DEConvParams.random(4, 6, rng)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
        assert np.abs(deconv_forward_merged(x, p).data - deconv_forward_unfused(x, p).data).max() <= 1e-5

    def test_reparameterize_is_linear(self, rng):
        p, q = DEConvParams.random(3, 3, rng), DEConvParams.random(3, 3, rng)
        lhs = reparameterize(p + q).kernel.data
        rhs = reparameterize(p).kernel.data + reparameterize(q).kernel.data
        assert np.abs(lhs - rhs).max() <= 1e-6

    def test_fused_has_vanilla_conv_parameter_count(self):
        f = reparameterize(DEConvParams.zeros(5, 7))
        assert f.num_params() == 7 * 5 * 9 + 7

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            deconv_forward_unfused(Tensor(np.zeros((1, 2, 4, 4), np.float32)), DEConvParams.zeros(3, 3))

    def test_only_3x3_supported(self):
        with pytest.raises(DimensionError):
            DEConvParams(**{b: Tensor(np.zeros((1, 1) + (5, 5))) for b in BRANCHES}, bias=Tensor(np.zeros(1)))


def test_unfused_gradients_match_finite_differences():
    for e in run_suite(seed=3, names=["deconv_unfused", "deconv_merged"]):
        assert e.passed, e.as_dict()
