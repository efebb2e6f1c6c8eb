"""PSNR and SSIM on full RGB images in [0, 1], no border cropping."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deanet.tensor import DimensionError, Tensor

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def _as_chw(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise DimensionError(f"expected a single image, got batch of {a.shape[0]}")
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"expected [C, H, W] image, got shape {a.shape}")
    return a


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); ``math.inf`` for identical images."""
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise DimensionError(f"psnr: {x.shape} != {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=2) @ g


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: {x.shape} != {y.shape}")
    if min(x.shape[1:]) < WIN_SIZE:
        raise DimensionError(f"ssim needs H, W >= {WIN_SIZE}, got {x.shape[1:]}")
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM: 11x11 Gaussian window (sigma 1.5), valid region, per channel then averaged."""
    m = ssim_map(a, b, data_range)
    return float(np.mean(m.mean(axis=(1, 2))))
