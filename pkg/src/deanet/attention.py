"""Content-guided attention (CGA).

A coarse importance map is the broadcast sum of a channel vector and a
single spatial map; each channel is then refined by a grouped 7x7 conv that
sees exactly that channel's feature map and its coarse map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deanet import ops
from deanet.tensor import ConvSpec, DimensionError, Tensor

BOTTLENECK = 16


def reduced_width(channels: int) -> int:
    return BOTTLENECK if channels >= BOTTLENECK else channels


@dataclass
class CGAParams:
    ca_reduce: Tensor  # [r, C, 1, 1]
    ca_reduce_bias: Tensor
    ca_expand: Tensor  # [C, r, 1, 1]
    ca_expand_bias: Tensor
    sa_conv: Tensor  # [1, 2, 7, 7]
    sa_bias: Tensor
    refine_conv: Tensor  # [C, 2, 7, 7], groups=C
    refine_bias: Tensor

    def __post_init__(self):
        expected = self.shapes(self.channels)
        for k, shape in expected.items():
            if getattr(self, k).shape != shape:
                raise DimensionError(f"CGAParams.{k} shape {getattr(self, k).shape} != {shape}")

    @property
    def channels(self) -> int:
        return self.refine_conv.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def shapes(channels: int) -> dict[str, tuple[int, ...]]:
        c, r = channels, reduced_width(channels)
        return {
            "ca_reduce": (r, c, 1, 1),
            "ca_reduce_bias": (r,),
            "ca_expand": (c, r, 1, 1),
            "ca_expand_bias": (c,),
            "sa_conv": (1, 2, 7, 7),
            "sa_bias": (1,),
            "refine_conv": (c, 2, 7, 7),
            "refine_bias": (c,),
        }

    @classmethod
    def zeros(cls, channels: int, dtype=np.float32) -> "CGAParams":
        return cls(**{k: Tensor(np.zeros(s, dtype=dtype)) for k, s in cls.shapes(channels).items()})

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale=0.2, dtype=np.float32) -> "CGAParams":
        return cls(
            **{k: Tensor((rng.standard_normal(s) * scale).astype(dtype)) for k, s in cls.shapes(channels).items()}
        )


def _check(x: Tensor, p: CGAParams):
    if x.data.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"CGA over {p.channels} channels got input {x.shape}")


def channel_attention(x: Tensor, p: CGAParams) -> Tensor:
    """``[n, C, 1, 1]`` channel weights: GAP -> 1x1 -> ReLU -> 1x1."""
    _check(x, p)
    c, r = p.channels, p.ca_reduce.shape[0]
    h = ops.conv2d(ops.gap_spatial(x), p.ca_reduce, p.ca_reduce_bias, ConvSpec(c, r, 1, 1))
    return ops.conv2d(ops.relu(h), p.ca_expand, p.ca_expand_bias, ConvSpec(r, c, 1, 1))


def spatial_attention(x: Tensor, p: CGAParams) -> Tensor:
    """``[n, 1, H, W]`` map from 7x7 conv over [channel-mean, channel-max]."""
    _check(x, p)
    pooled = ops.concat_channels(ops.gap_channel(x), ops.gmp_channel(x))
    return ops.conv2d(pooled, p.sa_conv, p.sa_bias, ConvSpec(2, 1, 7, 7, padding=3))


def refine(x: Tensor, coarse: Tensor, p: CGAParams) -> Tensor:
    """Per-channel sigmoid maps from the interleaved (x_i, coarse_i) pairs."""
    c = p.channels
    pairs = ops.channel_shuffle2(ops.concat_channels(x, coarse))
    spec = ConvSpec(2 * c, c, 7, 7, padding=3, groups=c)
    return ops.sigmoid(ops.conv2d(pairs, p.refine_conv, p.refine_bias, spec))


def cga(x: Tensor, p: CGAParams) -> Tensor:
    """Channel-specific importance maps, same shape as ``x``, values in (0, 1)."""
    coarse = ops.add(channel_attention(x, p), spatial_attention(x, p))
    return refine(x, coarse, p)


def apply_sim(x: Tensor, w: Tensor) -> Tensor:
    if x.shape != w.shape:
        raise DimensionError(f"apply_sim: {x.shape} != {w.shape}")
    return ops.mul(x, w)
