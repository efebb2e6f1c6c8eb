"""Analytic FLOP counting and fused/unfused latency measurement.

FLOPs follow the common convention of one per multiply-accumulate of a
convolution; bias adds, activations, pooling and elementwise ops are left
out.  Under it the default network costs 31.5 G on a 256x256 image.  Each
unfused DEConv branch runs as a full 3x3 convolution with its equivalent
kernel, so an unfused DEConv costs five times the fused one.
"""

from __future__ import annotations

import statistics
import time

import numpy as np

from deanet.deconv import BRANCHES
from deanet.network import BLOCK_STAGES, NetworkConfig, NetworkParams, dea_net_forward, fuse_network, layer_shapes
from deanet.tensor import Tensor

# downsampling factor of each stage's output relative to the input image
_STAGE_FACTOR = {
    "stem": 1, "enc1": 1, "dec1": 1, "tail": 1,
    "down1": 2, "enc2": 2, "dec2": 2, "fuse2": 2,
    "down2": 4, "mid": 4, "fuse3": 4,
}
# transposed convs are charged per input pixel
_UP_INPUT_FACTOR = {"up1": 4, "up2": 2}


def _check_hw(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % 4 or w % 4:
        raise ValueError(f"size {h}x{w} must be positive and divisible by 4")


def layer_flops(config: NetworkConfig, h: int, w: int, fused: bool = True) -> dict[str, int]:
    """FLOPs of each convolution for one ``h x w`` image, keyed by layer name."""
    _check_hw(h, w)
    out = {}
    for name, shape in layer_shapes(config, fused).items():
        if not name.endswith(".kernel"):
            continue
        layer = name[: -len(".kernel")]
        stage = name.split(".")[0]
        if stage in _UP_INPUT_FACTOR:
            f = _UP_INPUT_FACTOR[stage]
            pixels = (h // f) * (w // f)
        elif ".cga_ca_" in name:
            pixels = 1
        else:
            f = _STAGE_FACTOR[stage]
            pixels = (h // f) * (w // f)
        if any(f".deconv_{b}." in name for b in BRANCHES):
            macs = shape[0] * shape[1] * 9
        else:
            macs = int(np.prod(shape))
        out[layer] = macs * pixels
    return out


def deconv_flops(config: NetworkConfig, h: int, w: int, fused: bool) -> int:
    """Total FLOPs spent in DEConv layers."""
    return sum(v for k, v in layer_flops(config, h, w, fused).items() if ".deconv" in k)


def network_flops(config: NetworkConfig, h: int, w: int, fused: bool) -> int:
    return sum(layer_flops(config, h, w, fused).values())


def _median_ms(fn, repeat: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def run_bench(params: NetworkParams, h: int, w: int, repeat: int = 10, warmup: int = 1, seed: int = 0) -> dict:
    """Median forward latency of the unfused and fused network on one image.

    Fusion happens once up front and is not timed.
    """
    if params.fused:
        raise ValueError("benchmark needs an unfused archive to time both forms")
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    _check_hw(h, w)
    cfg = params.config
    x = Tensor(np.random.default_rng(seed).uniform(0, 1, (1, cfg.in_channels, h, w)).astype(np.float32))
    fused = fuse_network(params)
    unfused_ms = _median_ms(lambda: dea_net_forward(x, params, "unfused"), repeat, warmup)
    fused_ms = _median_ms(lambda: dea_net_forward(x, fused, "fused"), repeat, warmup)
    deconv_u = deconv_flops(cfg, h, w, fused=False)
    deconv_f = deconv_flops(cfg, h, w, fused=True)
    return {
        "unfused_ms_median": unfused_ms,
        "fused_ms_median": fused_ms,
        "speedup": unfused_ms / fused_ms if fused_ms > 0 else float("inf"),
        "deconv_flops_unfused": deconv_u,
        "deconv_flops_fused": deconv_f,
        "deconv_flop_ratio": deconv_u / deconv_f if deconv_f else None,
        "network_flops_unfused": network_flops(cfg, h, w, fused=False),
        "network_flops_fused": network_flops(cfg, h, w, fused=True),
        "deconv_layers": sum(cfg.block_counts),
        "size": [h, w],
        "repeat": repeat,
    }
