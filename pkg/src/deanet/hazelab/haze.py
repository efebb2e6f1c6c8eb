"""Atmospheric scattering model: I = J * t + A * (1 - t), t = exp(-beta * depth)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.ndimage import uniform_filter

from deanet.tensor import Tensor

DEPTH_KINDS = ("ramp", "radial", "smooth-noise")


@dataclass
class HazeParams:
    airlight: Union[float, np.ndarray]  # scalar or per-channel, expected in [0.7, 1.0]
    beta: float
    depth: np.ndarray  # [1, 1, H, W] or [H, W], >= 0

    def __post_init__(self):
        self.airlight = np.asarray(self.airlight, dtype=np.float64)
        if self.airlight.size not in (1, 3) or not np.isfinite(self.airlight).all():
            raise ValueError(f"airlight must be a finite scalar or 3-vector, got {self.airlight}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        depth = np.asarray(self.depth.data if isinstance(self.depth, Tensor) else self.depth, dtype=np.float64)
        if (depth < 0).any():
            raise ValueError("depth must be non-negative")
        self.depth = depth

    def transmission(self) -> np.ndarray:
        return np.exp(-self.beta * self.depth)


def synthesize_haze(clean, hp: HazeParams):
    """Hazy image for a clean ``[1, 3, H, W]`` (or ``[3, H, W]``) image in [0, 1].

    Returns the same kind (Tensor or float32 array) and shape, clamped to [0, 1].
    """
    j = np.asarray(clean.data if isinstance(clean, Tensor) else clean, dtype=np.float64)
    chan_axis = j.ndim - 3
    h, w = j.shape[-2:]
    t = hp.transmission().reshape(h, w)
    a = hp.airlight.reshape(-1)
    a = a.reshape((1,) * chan_axis + (a.size, 1, 1))
    out = np.clip(j * t + a * (1.0 - t), 0.0, 1.0).astype(np.float32)
    return Tensor(out) if isinstance(clean, Tensor) else out


def _normalize(d: np.ndarray) -> np.ndarray:
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def gen_depth(kind: str, h: int, w: int, seed: int = 0) -> np.ndarray:
    """Depth field in [0, 1] of shape ``[1, 1, h, w]`` (float32)."""
    if h < 1 or w < 1:
        raise ValueError(f"depth dims must be positive, got {h}x{w}")
    if kind == "ramp":
        row = np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1)
        d = np.broadcast_to(row, (h, w)).copy()
    elif kind == "radial":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        d = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
        d = d / d.max() if d.max() > 0 else d
    elif kind == "smooth-noise":
        rng = np.random.default_rng(seed)
        d = rng.random((h, w))
        for _ in range(3):
            d = uniform_filter(d, size=7, mode="reflect")
        d = _normalize(d)
    else:
        raise ValueError(f"unknown depth kind {kind!r}; choose from {DEPTH_KINDS}")
    return d.astype(np.float32).reshape(1, 1, h, w)


def procedural_clean(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A structured clean RGB image ``[3, h, w]`` in [0, 1]: smooth colour field, shapes and stripes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.empty((3, h, w))
    for c in range(3):
        gy, gx = rng.uniform(-0.6, 0.6, size=2)
        base[c] = rng.uniform(0.2, 0.8) + gy * (yy - 0.5) + gx * (xx - 0.5)
    noise = rng.random((3, h, w))
    for _ in range(2):
        noise = uniform_filter(noise, size=(1, 5, 5), mode="reflect")
    base += 0.6 * (noise - noise.mean())
    for _ in range(int(rng.integers(3, 7))):
        colour = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hy, hx = rng.uniform(0.05, 0.25, size=2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        base[:, mask] = colour[:, None]
    if rng.random() < 0.5:
        freq = rng.uniform(8, 20)
        base += 0.15 * np.sign(np.sin(2 * np.pi * freq * (xx if rng.random() < 0.5 else yy)))
    return np.clip(base, 0.0, 1.0).astype(np.float32)
