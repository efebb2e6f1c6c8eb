"""DEB/DEAB blocks, CGA mixup fusion and the three-level dehazing network.

Parameters live in one flat ``{name: Tensor}`` mapping using canonical
names ``stage.index.layer.{kernel|bias}``; block views share those tensors,
so gradients and optimizer updates act on the mapping directly.

Stages, in forward order::

    stem  enc1  down1  enc2  down2  mid  fuse3  up1  dec2  fuse2  up2  dec1  tail

``mid`` holds DEABs, the other enc/dec stages hold DEBs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from deanet import ops
from deanet.attention import CGAParams, apply_sim, cga
from deanet.deconv import (
    BRANCH_WEIGHT_SHAPES,
    BRANCHES,
    DEConvParams,
    FusedKernel,
    deconv_forward_fused,
    deconv_forward_merged,
    deconv_forward_unfused,
    reparameterize,
)
from deanet.tensor import ConvSpec, DimensionError, Tensor

Mode = Literal["fused", "unfused", "merged"]

BLOCK_STAGES = ("enc1", "enc2", "mid", "dec2", "dec1")
CGA_LAYERS = {
    "cga_ca_reduce": ("ca_reduce", "ca_reduce_bias"),
    "cga_ca_expand": ("ca_expand", "ca_expand_bias"),
    "cga_sa": ("sa_conv", "sa_bias"),
    "cga_refine": ("refine_conv", "refine_bias"),
}


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    block_counts: tuple[int, int, int, int, int] = (4, 4, 8, 4, 4)
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        if len(self.block_counts) != 5 or any(b < 0 for b in self.block_counts):
            raise ValueError(f"block_counts must be 5 non-negative ints, got {self.block_counts}")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    def stage_width(self, stage: str) -> int:
        c = self.base_channels
        return {"enc1": c, "dec1": c, "enc2": 2 * c, "dec2": 2 * c, "mid": 4 * c, "fuse2": 2 * c, "fuse3": 4 * c}[stage]

    def stage_blocks(self, stage: str) -> int:
        return self.block_counts[BLOCK_STAGES.index(stage)]


TINY_CONFIG = NetworkConfig(base_channels=8, block_counts=(1, 1, 2, 1, 1))


@dataclass
class DEBParams:
    deconv: Union[DEConvParams, FusedKernel]
    conv_kernel: Tensor
    conv_bias: Tensor


@dataclass
class DEABParams(DEBParams):
    cga: CGAParams = None


@dataclass
class FusionParams:
    cga: CGAParams
    proj_kernel: Tensor
    proj_bias: Tensor


# --------------------------------------------------------------------------
# blocks


def apply_deconv(x: Tensor, d: Union[DEConvParams, FusedKernel], mode: Mode = "unfused") -> Tensor:
    if isinstance(d, FusedKernel):
        if mode == "unfused":
            raise ValueError("unfused mode needs branch parameters; got a fused kernel")
        return deconv_forward_fused(x, d)
    if mode == "fused":
        return deconv_forward_fused(x, reparameterize(d))
    if mode == "merged":
        return deconv_forward_merged(x, d)
    return deconv_forward_unfused(x, d)


def _conv3(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    c = k.shape[0]
    return ops.conv2d(x, k, b, ConvSpec(x.shape[1], c, 3, 3, padding=1))


def _body(x: Tensor, p: DEBParams, mode: Mode) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != p.conv_kernel.shape[0]:
        raise DimensionError(f"block of width {p.conv_kernel.shape[0]} got input {x.shape}")
    return _conv3(ops.relu(apply_deconv(x, p.deconv, mode)), p.conv_kernel, p.conv_bias)


def deb_forward(x: Tensor, p: DEBParams, mode: Mode = "unfused") -> Tensor:
    """x + conv3x3(relu(deconv(x)))"""
    return ops.add(x, _body(x, p, mode))


def deab_forward(x: Tensor, p: DEABParams, mode: Mode = "unfused") -> Tensor:
    """x + b * cga(b) with b = conv3x3(relu(deconv(x)))"""
    b = _body(x, p, mode)
    return ops.add(x, apply_sim(b, cga(b, p.cga)))


def fuse(f_low: Tensor, f_high: Tensor, p: FusionParams) -> Tensor:
    """proj1x1(f_low * w + f_high * (1 - w) + f_low + f_high) with w = cga(f_low + f_high)."""
    if f_low.shape != f_high.shape:
        raise DimensionError(f"fuse: {f_low.shape} != {f_high.shape}")
    w = cga(ops.add(f_low, f_high), p.cga)
    return fuse_with_weights(f_low, f_high, w, p)


def mixup(f_low: Tensor, f_high: Tensor, w: Tensor) -> Tensor:
    """Pre-projection term of the fusion for given weights ``w``."""
    mixed = ops.add(ops.mul(f_low, w), ops.mul(f_high, ops.sub(1.0, w)))
    return ops.add(mixed, ops.add(f_low, f_high))


def fuse_with_weights(f_low: Tensor, f_high: Tensor, w: Tensor, p: FusionParams) -> Tensor:
    c = p.proj_kernel.shape[0]
    return ops.conv2d(mixup(f_low, f_high, w), p.proj_kernel, p.proj_bias, ConvSpec(c, c, 1, 1))


# --------------------------------------------------------------------------
# parameter tree


def layer_shapes(config: NetworkConfig, fused: bool = False) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape for every learnable tensor, in forward order."""
    c, cin, cout = config.base_channels, config.in_channels, config.out_channels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, ic, oc, k):
        shapes[f"{name}.kernel"] = (oc, ic, k, k)
        shapes[f"{name}.bias"] = (oc,)

    def deconv(prefix, width):
        if fused:
            shapes[f"{prefix}.deconv.kernel"] = (width, width, 3, 3)
        else:
            for b in BRANCHES:
                shapes[f"{prefix}.deconv_{b}.kernel"] = (width, width) + BRANCH_WEIGHT_SHAPES[b]
        shapes[f"{prefix}.deconv.bias"] = (width,)

    def cga_layers(prefix, width):
        cs = CGAParams.shapes(width)
        for layer, (k, b) in CGA_LAYERS.items():
            shapes[f"{prefix}.{layer}.kernel"] = cs[k]
            shapes[f"{prefix}.{layer}.bias"] = cs[b]

    def blocks(stage):
        width = config.stage_width(stage)
        for i in range(config.stage_blocks(stage)):
            deconv(f"{stage}.{i}", width)
            conv(f"{stage}.{i}.conv", width, width, 3)
            if stage == "mid":
                cga_layers(f"{stage}.{i}", width)

    def fusion(stage):
        width = config.stage_width(stage)
        cga_layers(f"{stage}.0", width)
        conv(f"{stage}.0.proj", width, width, 1)

    def up(name, ic, oc):
        shapes[f"{name}.kernel"] = (ic, oc, 4, 4)
        shapes[f"{name}.bias"] = (oc,)

    conv("stem.0.conv", cin, c, 3)
    blocks("enc1")
    conv("down1.0.conv", c, 2 * c, 3)
    blocks("enc2")
    conv("down2.0.conv", 2 * c, 4 * c, 3)
    blocks("mid")
    fusion("fuse3")
    up("up1.0.convt", 4 * c, 2 * c)
    blocks("dec2")
    fusion("fuse2")
    up("up2.0.convt", 2 * c, c)
    blocks("dec1")
    conv("tail.0.conv", c, cout, 3)
    return shapes


@dataclass
class NetworkParams:
    config: NetworkConfig
    tensors: dict[str, Tensor]
    fused: bool = False

    def __post_init__(self):
        expected = layer_shapes(self.config, self.fused)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise DimensionError(f"parameter names mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.tensors[k]) for k in sorted(self.tensors)]

    def requires_grad_(self, flag: bool = True) -> "NetworkParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()}, self.fused)

    def num_stored(self) -> int:
        return sum(t.size for t in self.tensors.values())

    # views -----------------------------------------------------------------

    def conv(self, name: str) -> tuple[Tensor, Tensor]:
        return self.tensors[f"{name}.kernel"], self.tensors[f"{name}.bias"]

    def deconv(self, prefix: str) -> Union[DEConvParams, FusedKernel]:
        t = self.tensors
        if self.fused:
            return FusedKernel(t[f"{prefix}.deconv.kernel"], t[f"{prefix}.deconv.bias"])
        return DEConvParams(**{b: t[f"{prefix}.deconv_{b}.kernel"] for b in BRANCHES}, bias=t[f"{prefix}.deconv.bias"])

    def cga(self, prefix: str) -> CGAParams:
        kw = {}
        for layer, (k, b) in CGA_LAYERS.items():
            kw[k], kw[b] = self.conv(f"{prefix}.{layer}")
        return CGAParams(**kw)

    def block(self, stage: str, i: int) -> DEBParams:
        prefix = f"{stage}.{i}"
        k, b = self.conv(f"{prefix}.conv")
        if stage == "mid":
            return DEABParams(self.deconv(prefix), k, b, self.cga(prefix))
        return DEBParams(self.deconv(prefix), k, b)

    def fusion(self, stage: str) -> FusionParams:
        k, b = self.conv(f"{stage}.0.proj")
        return FusionParams(self.cga(f"{stage}.0"), k, b)


def _fan_in(name: str, shape) -> int:
    if name.endswith("convt.kernel"):
        # stride-2 transposed conv: each output sees ic * (k/2)^2 inputs
        return max(1, shape[0] * shape[2] * shape[3] // 4)
    return max(1, int(np.prod(shape[1:])))


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Uniform fan-in kernels (bound 1/sqrt(fan_in)); zero biases; zero difference-branch weights."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".bias") or any(f"deconv_{b}." in name for b in ("cdc", "adc", "hdc", "vdc")):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data)
    return NetworkParams(config, tensors, fused=False)


def zero_params(config: NetworkConfig, fused: bool = False, dtype=np.float32) -> NetworkParams:
    return NetworkParams(
        config, {k: Tensor(np.zeros(s, dtype=dtype)) for k, s in layer_shapes(config, fused).items()}, fused
    )


def random_params(config: NetworkConfig, rng: np.random.Generator, gain: float = 0.7, dtype=np.float32):
    """Dense random weights everywhere, difference branches included.

    Kernels are normal with std ``gain / sqrt(fan_in)``, biases std 0.1.
    """
    tensors = {}
    for name, shape in layer_shapes(config).items():
        std = 0.1 if name.endswith(".bias") else gain / math.sqrt(_fan_in(name, shape))
        tensors[name] = Tensor((rng.standard_normal(shape) * std).astype(dtype))
    return NetworkParams(config, tensors)


def fuse_network(params: NetworkParams) -> NetworkParams:
    """Replace every DEConv's branches by its single fused kernel."""
    if params.fused:
        return params
    config = params.config
    out = {}
    for name, t in params.tensors.items():
        if "deconv_" not in name:
            out[name] = Tensor(t.data.copy())
    for stage in BLOCK_STAGES:
        for i in range(config.stage_blocks(stage)):
            f = reparameterize(params.deconv(f"{stage}.{i}"))
            out[f"{stage}.{i}.deconv.kernel"] = f.kernel
            out[f"{stage}.{i}.deconv.bias"] = f.bias
    return NetworkParams(config, out, fused=True)


# --------------------------------------------------------------------------
# forward


def dea_net_forward(image: Tensor, params: NetworkParams, mode: Mode = "unfused") -> Tensor:
    """Map ``[n, in, H, W]`` to ``[n, out, H, W]``; H and W must be divisible by 4."""
    cfg = params.config
    if image.data.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected [n, {cfg.in_channels}, H, W] input, got {image.shape}")
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise DimensionError(f"spatial size {h}x{w} must be divisible by 4; pad the input first")
    if mode == "fused" and not params.fused:
        params = fuse_network(params)
    c = cfg.base_channels

    def stage(x, name):
        for i in range(cfg.stage_blocks(name)):
            blk = params.block(name, i)
            x = deab_forward(x, blk, mode) if name == "mid" else deb_forward(x, blk, mode)
        return x

    def strided(x, name, ic, oc):
        k, b = params.conv(name)
        return ops.conv2d(x, k, b, ConvSpec(ic, oc, 3, 3, stride=2, padding=1))

    def upsample(x, name, ic, oc):
        k, b = params.conv(name)
        return ops.conv_transpose2d(x, k, b, ConvSpec(ic, oc, 4, 4, stride=2, padding=1))

    x = _conv3(image, *params.conv("stem.0.conv"))
    x = stage(x, "enc1")
    skip2 = strided(x, "down1.0.conv", c, 2 * c)
    x = stage(skip2, "enc2")
    skip3 = strided(x, "down2.0.conv", 2 * c, 4 * c)
    x = stage(skip3, "mid")
    x = fuse(skip3, x, params.fusion("fuse3"))
    x = upsample(x, "up1.0.convt", 4 * c, 2 * c)
    x = stage(x, "dec2")
    x = fuse(skip2, x, params.fusion("fuse2"))
    x = upsample(x, "up2.0.convt", 2 * c, c)
    x = stage(x, "dec1")
    return _conv3(x, *params.conv("tail.0.conv"))


# --------------------------------------------------------------------------
# counting


def count_params(params: Union[NetworkParams, NetworkConfig]) -> int:
    """Scalar learnables in fused inference form."""
    config = params.config if isinstance(params, NetworkParams) else params
    return sum(int(np.prod(s)) for s in layer_shapes(config, fused=True).values())


def analytic_param_count(config: NetworkConfig) -> int:
    """Closed-form fused parameter count."""
    c, cin, cout = config.base_channels, config.in_channels, config.out_channels
    n1, n2, n3, n4, n5 = config.block_counts

    def conv(k, i, o):
        return o * i * k * k + o

    def cga_count(w):
        r = min(w, 16)
        return conv(1, w, r) + conv(1, r, w) + conv(7, 2, 1) + (w * 2 * 49 + w)

    def deb(w):
        return 2 * conv(3, w, w)

    total = conv(3, cin, c) + conv(3, c, cout)
    total += (n1 + n5) * deb(c) + (n2 + n4) * deb(2 * c) + n3 * (deb(4 * c) + cga_count(4 * c))
    total += conv(3, c, 2 * c) + conv(3, 2 * c, 4 * c)
    total += (4 * c * 2 * c * 16 + 2 * c) + (2 * c * c * 16 + c)
    total += cga_count(4 * c) + conv(1, 4 * c, 4 * c) + cga_count(2 * c) + conv(1, 2 * c, 2 * c)
    return total


def deconv_layer_count(config: NetworkConfig) -> int:
    return sum(config.block_counts)
