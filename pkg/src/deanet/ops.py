"""Differentiable tensor operations.

Every op computes its forward result with numpy and, if a tape is active
and any input is tracked, records a closure producing input gradients.
Convolution is cross-correlation with zero padding.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deanet.tensor import ConvSpec, DimensionError, NumericError, Tensor, active_tape, note_decision


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _result(data: np.ndarray, inputs, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(inputs, out, backward_fn, op)
    return out


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"{name}: non-finite input")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# convolution kernels (raw numpy)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (n, c, kh, kw, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh, kw, stride, pad, oh, ow) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv_forward_raw(x, w, stride, pad, groups) -> np.ndarray:
    n, c, h, wd = x.shape
    oc, cg, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, pad, oh, ow).reshape(n, groups, cg * kh * kw, oh * ow)
    wk = w.reshape(groups, oc // groups, cg * kh * kw)
    out = np.matmul(wk, cols)
    return out.reshape(n, oc, oh, ow)


def conv_backward_input_raw(g, w, x_shape, stride, pad, groups) -> np.ndarray:
    n, oc, oh, ow = g.shape
    _, cg, kh, kw = w.shape
    wk = w.reshape(groups, oc // groups, cg * kh * kw)
    gg = g.reshape(n, groups, oc // groups, oh * ow)
    cols = np.matmul(wk.transpose(0, 2, 1), gg)
    return _col2im(cols, x_shape, kh, kw, stride, pad, oh, ow)


def conv_backward_weight_raw(x, g, w_shape, stride, pad, groups) -> np.ndarray:
    n, oc, oh, ow = g.shape
    _, cg, kh, kw = w_shape
    cols = _im2col(x, kh, kw, stride, pad, oh, ow).reshape(n, groups, cg * kh * kw, oh * ow)
    gg = g.reshape(n, groups, oc // groups, oh * ow)
    dw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return dw.reshape(w_shape)


def _check_conv(name, x: Tensor, kernel: Tensor, bias: Optional[Tensor], spec: ConvSpec, kshape):
    if x.data.ndim != 4:
        raise DimensionError(f"{name}: input must be NCHW, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"{name}: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if kernel.shape != kshape:
        raise DimensionError(f"{name}: kernel shape {kernel.shape} != expected {kshape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"{name}: bias shape {bias.shape} != ({spec.out_channels},)")
    _check_finite(name, x.data, kernel.data)
    if bias is not None:
        _check_finite(name, bias.data)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Zero-padded cross-correlation; kernel is ``[oc, ic/groups, kh, kw]``."""
    _check_conv("conv2d", x, kernel, bias, spec, spec.kernel_shape)
    spec.output_hw(x.shape[2], x.shape[3])
    s, p, g = spec.stride, spec.padding, spec.groups
    out = conv_forward_raw(x.data, kernel.data, s, p, g)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def back(grad):
        dx = conv_backward_input_raw(grad, kernel.data, x.shape, s, p, g)
        dk = conv_backward_weight_raw(x.data, grad, kernel.shape, s, p, g)
        db = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, back, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Transposed convolution; kernel is ``[ic, oc/groups, kh, kw]``.

    Output size is ``(h - 1) * stride - 2 * padding + kernel``.
    """
    g = spec.groups
    kshape = (spec.in_channels, spec.out_channels // g, spec.kernel_h, spec.kernel_w)
    _check_conv("conv_transpose2d", x, kernel, bias, spec, kshape)
    n, _, h, w = x.shape
    s, p = spec.stride, spec.padding
    oh = (h - 1) * s - 2 * p + spec.kernel_h
    ow = (w - 1) * s - 2 * p + spec.kernel_w
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv_transpose2d: input {h}x{w} gives empty output")
    out_shape = (n, spec.out_channels, oh, ow)
    out = conv_backward_input_raw(x.data, kernel.data, out_shape, s, p, g)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def back(grad):
        dx = conv_forward_raw(grad, kernel.data, s, p, g)
        dk = conv_backward_weight_raw(grad, x.data, kernel.shape, s, p, g)
        db = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, back, "conv_transpose2d")


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_decision(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # saturated logits round to 0 or 1; keep the range open (one-ulp change)
    info = np.finfo(y.dtype)
    y = np.clip(y, info.smallest_subnormal, 1 - info.epsneg)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast_checked("add", a, b, np.add)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast_checked("sub", a, b, np.subtract)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast_checked("mul", a, b, np.multiply)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), back, "mul")


def scale(x: Tensor, k: float) -> Tensor:
    return _result((x.data * k).astype(x.dtype), (x,), lambda g: (g * k,), "scale")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_checked(name, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None
    out = fn(a.data, b.data)
    return out.astype(np.result_type(a.dtype, b.dtype), copy=False).reshape(shape)


# --------------------------------------------------------------------------
# reductions and pooling


def _require_nchw(name, x: Tensor):
    if x.data.ndim != 4:
        raise DimensionError(f"{name}: expected NCHW input, got shape {x.shape}")


def gap_spatial(x: Tensor) -> Tensor:
    """Mean over (h, w) -> ``[n, c, 1, 1]``."""
    _require_nchw("gap_spatial", x)
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("gap_spatial: empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "gap_spatial")


def gap_channel(x: Tensor) -> Tensor:
    """Mean over channels -> ``[n, 1, h, w]``."""
    _require_nchw("gap_channel", x)
    c = x.shape[1]
    if c == 0:
        raise DimensionError("gap_channel: no channels")
    out = x.data.mean(axis=1, keepdims=True, dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),), "gap_channel")


def gmp_channel(x: Tensor) -> Tensor:
    """Max over channels -> ``[n, 1, h, w]``; ties send gradient to the lowest channel."""
    _require_nchw("gmp_channel", x)
    if x.shape[1] == 0:
        raise DimensionError("gmp_channel: no channels")
    idx = np.argmax(x.data, axis=1)[:, None]
    note_decision(idx)
    out = np.take_along_axis(x.data, idx, axis=1)

    def back(g):
        dx = np.zeros_like(x.data, dtype=g.dtype)
        np.put_along_axis(dx, idx, g, axis=1)
        return (dx,)

    return _result(out, (x,), back, "gmp_channel")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype)).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=x.dtype)).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()) / n, x.shape).copy(),), "mean_all")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error as a ``1x1x1x1`` tensor."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shape {pred.shape} != {target.shape}")
    diff = pred.data - target.data
    note_decision(np.sign(diff))
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype).reshape(1, 1, 1, 1)

    def back(g):
        s = np.sign(diff) * (g.reshape(()) / n)
        return s, -s

    return _result(out, (pred, target), back, "l1_loss")


# --------------------------------------------------------------------------
# shape manipulation


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_nchw("concat_channels", a)
    _require_nchw("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def channel_shuffle2(x: Tensor) -> Tensor:
    """Interleave the two channel halves: ``[a0..aC-1, b0..bC-1] -> [a0, b0, a1, b1, ...]``."""
    _require_nchw("channel_shuffle2", x)
    n, c2, h, w = x.shape
    if c2 % 2:
        raise DimensionError(f"channel_shuffle2: odd channel count {c2}")
    c = c2 // 2
    out = x.data.reshape(n, 2, c, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c2, h, w)

    def back(g):
        return (g.reshape(n, c, 2, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c2, h, w),)

    return _result(out, (x,), back, "channel_shuffle2")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def matmul_const(x: Tensor, m: np.ndarray) -> Tensor:
    """Apply a constant matrix to the trailing axis: ``x[..., k] @ m[k, l]``."""
    m = np.asarray(m, dtype=x.dtype)
    if x.shape[-1] != m.shape[0]:
        raise DimensionError(f"matmul_const: trailing dim {x.shape[-1]} != {m.shape[0]}")
    out = x.data @ m
    return _result(out, (x,), lambda g: (g @ m.T,), "matmul_const")
