import math

import numpy as np
import pytest

from deanet import ops
from deanet.attention import CGAParams, cga
from deanet.deconv import DEConvParams, reparameterize
from deanet.gradcheck import gradcheck
from deanet.network import (
    TINY_CONFIG,
    DEABParams,
    DEBParams,
    FusionParams,
    NetworkConfig,
    NetworkParams,
    analytic_param_count,
    count_params,
    dea_net_forward,
    deab_forward,
    deb_forward,
    fuse,
    fuse_network,
    init_params,
    layer_shapes,
    mixup,
    random_params,
    zero_params,
)
from deanet.tensor import DimensionError, Tensor

from oracles import conv2d_loops


def T(a, dtype=np.float32):
    return Tensor(np.asarray(a, dtype))


def rand_block(rng, c, attention=False, dtype=np.float32):
    d = DEConvParams.random(c, c, rng, dtype=dtype)
    k = T(rng.standard_normal((c, c, 3, 3)) / math.sqrt(9 * c), dtype)
    b = T(rng.standard_normal(c) * 0.1, dtype)
    if attention:
        return DEABParams(d, k, b, CGAParams.random(c, rng, dtype=dtype))
    return DEBParams(d, k, b)


def body_oracle(x, p):
    f = reparameterize(p.deconv)
    h = np.maximum(conv2d_loops(x, f.kernel.data, f.bias.data, pad=1), 0)
    return conv2d_loops(h, p.conv_kernel.data, p.conv_bias.data, pad=1)


class TestBlocks:
    def test_zero_deb_is_identity(self, rng):
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        p = DEBParams(DEConvParams.zeros(4, 4), T(np.zeros((4, 4, 3, 3))), T(np.zeros(4)))
        np.testing.assert_array_equal(deb_forward(T(x), p).data, x)

    def test_zero_deab_is_identity(self, rng):
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        p = DEABParams(DEConvParams.zeros(4, 4), T(np.zeros((4, 4, 3, 3))), T(np.zeros(4)), CGAParams.zeros(4))
        np.testing.assert_array_equal(deab_forward(T(x), p).data, x)

    # wiring checks run in float64 so rounding does not enter the comparison
    def test_deb_matches_composition(self, rng):
        p = rand_block(rng, 4, dtype=np.float64)
        x = rng.standard_normal((1, 4, 6, 6))
        y = deb_forward(Tensor(x), p).data
        assert y.shape == x.shape
        assert np.abs(y - (x + body_oracle(x, p))).max() <= 1e-6

    def test_deab_matches_composition(self, rng):
        p = rand_block(rng, 4, attention=True, dtype=np.float64)
        x = rng.standard_normal((1, 4, 6, 6))
        b = body_oracle(x, p)
        w = cga(Tensor(b), p.cga).data
        y = deab_forward(Tensor(x), p).data
        assert y.shape == x.shape
        assert np.abs(y - (x + b * w)).max() <= 1e-6

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            deb_forward(T(np.zeros((1, 3, 4, 4))), rand_block(rng, 4))

    @pytest.mark.parametrize("mode", ["fused", "merged"])
    def test_block_modes_agree(self, rng, mode):
        p = rand_block(rng, 8, attention=True)
        x = T(rng.standard_normal((2, 8, 6, 6)))
        ref = deab_forward(x, p, "unfused").data
        assert np.abs(deab_forward(x, p, mode).data - ref).max() <= 1e-5


class TestFusion:
    @pytest.fixture
    def pair(self, rng):
        return rng.standard_normal((2, 1, 3, 4, 4)).astype(np.float32)

    def test_w_one(self, pair):
        lo, hi = pair
        got = mixup(T(lo), T(hi), T(np.ones_like(lo))).data
        np.testing.assert_allclose(got, 2 * lo + hi, atol=1e-6)

    def test_w_half(self, pair):
        lo, hi = pair
        got = mixup(T(lo), T(hi), T(np.full_like(lo, 0.5))).data
        np.testing.assert_allclose(got, 1.5 * (lo + hi), atol=1e-6)

    def test_equal_inputs_any_w(self, pair, rng):
        f, _ = pair
        w = rng.uniform(size=f.shape).astype(np.float32)
        np.testing.assert_allclose(mixup(T(f), T(f), T(w)).data, 3 * f, atol=1e-6)

    def test_full_fusion_composition(self, pair, rng):
        lo, hi = pair
        p = FusionParams(CGAParams.random(3, rng), T(rng.standard_normal((3, 3, 1, 1))), T(rng.standard_normal(3)))
        w = cga(T(lo + hi), p.cga).data.astype(np.float64)
        pre = lo * w + hi * (1 - w) + lo + hi
        ref = conv2d_loops(pre, p.proj_kernel.data, p.proj_bias.data)
        assert np.abs(fuse(T(lo), T(hi), p).data - ref).max() <= 1e-5

    def test_mismatch(self, rng):
        p = FusionParams(CGAParams.zeros(3), T(np.zeros((3, 3, 1, 1))), T(np.zeros(3)))
        with pytest.raises(DimensionError):
            fuse(T(np.zeros((1, 3, 4, 4))), T(np.zeros((1, 3, 4, 2))), p)


# Independent per-layer listing of the tiny network (C=8, blocks 1,1,2,1,1).
def _conv(k, ic, oc):
    return oc * ic * k * k + oc


def _cga(c):
    r = min(c, 16)
    return _conv(1, c, r) + _conv(1, r, c) + _conv(7, 2, 1) + (c * 2 * 49 + c)


TINY_LAYERS = [
    ("stem", _conv(3, 3, 8)),
    ("enc1.0.deconv", _conv(3, 8, 8)),
    ("enc1.0.conv", _conv(3, 8, 8)),
    ("down1", _conv(3, 8, 16)),
    ("enc2.0.deconv", _conv(3, 16, 16)),
    ("enc2.0.conv", _conv(3, 16, 16)),
    ("down2", _conv(3, 16, 32)),
    ("mid.0.deconv", _conv(3, 32, 32)),
    ("mid.0.conv", _conv(3, 32, 32)),
    ("mid.0.cga", _cga(32)),
    ("mid.1.deconv", _conv(3, 32, 32)),
    ("mid.1.conv", _conv(3, 32, 32)),
    ("mid.1.cga", _cga(32)),
    ("fuse3.cga", _cga(32)),
    ("fuse3.proj", _conv(1, 32, 32)),
    ("up1", 32 * 16 * 16 + 16),
    ("dec2.0.deconv", _conv(3, 16, 16)),
    ("dec2.0.conv", _conv(3, 16, 16)),
    ("fuse2.cga", _cga(16)),
    ("fuse2.proj", _conv(1, 16, 16)),
    ("up2", 16 * 8 * 16 + 8),
    ("dec1.0.deconv", _conv(3, 8, 8)),
    ("dec1.0.conv", _conv(3, 8, 8)),
    ("tail", _conv(3, 8, 3)),
]


class TestCounting:
    def test_single_conv(self):
        assert _conv(3, 3, 8) == 224

    def test_tiny_matches_per_layer_listing(self):
        expected = sum(n for _, n in TINY_LAYERS)
        assert expected == 81695
        assert count_params(TINY_CONFIG) == expected
        assert analytic_param_count(TINY_CONFIG) == expected
        assert fuse_network(init_params(TINY_CONFIG)).num_stored() == expected

    @pytest.mark.parametrize("c,blocks", [(4, (0, 0, 0, 0, 0)), (8, (2, 1, 3, 0, 1)), (20, (1, 2, 1, 2, 1)), (32, (4, 4, 8, 4, 4))])
    def test_closed_form_matches_shapes(self, c, blocks):
        cfg = NetworkConfig(base_channels=c, block_counts=blocks)
        assert analytic_param_count(cfg) == count_params(cfg)

    def test_default_near_reported_size(self):
        n = count_params(NetworkConfig())
        print(f"default config: {n} parameters ({n / 3.653e6 - 1:+.1%} vs 3.653 M)")
        assert abs(n / 3.653e6 - 1) <= 0.10

    def test_fused_equals_vanilla_conv_network(self):
        # a DEConv contributes exactly a 3x3 conv's parameters after fusion
        shapes = layer_shapes(TINY_CONFIG, fused=True)
        for name, s in shapes.items():
            if name.endswith(".deconv.kernel"):
                assert s[2:] == (3, 3) and s[0] == s[1]


class TestForward:
    def test_shape(self):
        x = T(np.random.default_rng(0).random((1, 3, 32, 32)))
        assert dea_net_forward(x, init_params(TINY_CONFIG)).shape == (1, 3, 32, 32)

    @pytest.mark.parametrize("hw", [(30, 32), (32, 6), (2, 4)])
    def test_indivisible(self, hw):
        with pytest.raises(DimensionError):
            dea_net_forward(T(np.zeros((1, 3) + hw)), zero_params(TINY_CONFIG))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            dea_net_forward(T(np.zeros((1, 4, 8, 8))), zero_params(TINY_CONFIG))

    def test_zero_network_gives_tail_bias(self, rng):
        p = zero_params(TINY_CONFIG)
        p["tail.0.conv.bias"].data[:] = [0.1, 0.2, 0.3]
        y = dea_net_forward(T(rng.random((2, 3, 8, 12))), p).data
        np.testing.assert_array_equal(y, np.broadcast_to(np.float32([0.1, 0.2, 0.3])[None, :, None, None], y.shape))

    def test_fused_matches_unfused_over_seeds(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            p = random_params(TINY_CONFIG, rng)
            x = T(rng.random((1, 3, 16, 16)))
            d = np.abs(dea_net_forward(x, p, "unfused").data - dea_net_forward(x, fuse_network(p), "fused").data)
            worst = max(worst, float(d.max()))
        assert worst <= 1e-4

    def test_merged_matches_unfused(self, rng):
        p = random_params(TINY_CONFIG, rng)
        x = T(rng.random((1, 3, 8, 8)))
        assert np.abs(dea_net_forward(x, p, "merged").data - dea_net_forward(x, p).data).max() <= 1e-4

    def test_fused_archive_rejects_unfused_mode(self):
        with pytest.raises(ValueError):
            dea_net_forward(T(np.zeros((1, 3, 8, 8))), fuse_network(zero_params(TINY_CONFIG)), "unfused")

    def test_deterministic(self, rng):
        p = random_params(TINY_CONFIG, rng)
        x = T(rng.random((1, 3, 12, 8)))
        a, b = dea_net_forward(x, p).data, dea_net_forward(x, p).data
        assert a.tobytes() == b.tobytes()

    def test_init_layout(self):
        p = init_params(TINY_CONFIG, seed=3)
        for name, t in p.tensors.items():
            if name.endswith(".bias") or "deconv_" in name and "deconv_vc" not in name:
                assert not t.data.any(), name
            else:
                assert t.data.any(), name
        assert init_params(TINY_CONFIG, seed=3)["stem.0.conv.kernel"].data.tobytes() == p["stem.0.conv.kernel"].data.tobytes()

    def test_bad_param_set_rejected(self):
        p = zero_params(TINY_CONFIG)
        tensors = dict(p.tensors)
        del tensors["tail.0.conv.bias"]
        with pytest.raises(DimensionError):
            NetworkParams(TINY_CONFIG, tensors)


def test_l1_gradient_on_sampled_parameters():
    """d(L1)/d(weights) on ~1% of the tiny network's stored parameters."""
    rng = np.random.default_rng(7)
    p = random_params(TINY_CONFIG, rng)
    names = sorted(p.tensors)
    x = Tensor(rng.random((1, 3, 8, 8)).astype(np.float32))
    target = Tensor(rng.random((1, 3, 8, 8)).astype(np.float32))
    sizes = np.array([p[n].size for n in names])
    goal = int(math.ceil(0.01 * sizes.sum()))
    per = next(m for m in range(1, sizes.max() + 1) if np.minimum(sizes, m).sum() >= goal)
    for n in names:
        p[n].requires_grad = True

    def loss(x, target, *ts):
        params = NetworkParams(TINY_CONFIG, dict(zip(names, ts)))
        return ops.l1_loss(dea_net_forward(x, params), target)

    res = gradcheck(loss, [x, target] + [p[n] for n in names], eps=1e-3, max_elems=per, reference_dtype=np.float64)
    assert res.checked >= goal - res.nonsmooth
    assert res.passed(1e-3), res
