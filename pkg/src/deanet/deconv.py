"""Detail-enhanced convolution: five parallel 3x3 branches and their fusion.

Each difference branch stores only its free weights and maps them linearly
onto an equivalent dense 3x3 kernel (taps indexed row-major, 0..8):

* CDC pairs every tap with the center:  sum_p w(p) * (x(p) - x(c)).
* ADC pairs clockwise ring neighbours:  sum_i w_i * (x(r_i) - x(r_{i+1})),
  ring ``r0..r7`` starting top-left.
* HDC uses two horizontal pairs per row r:
  a_r * (x[r][1] - x[r][0]) + b_r * (x[r][2] - x[r][1]),
  giving the kernel row ``[-a_r, a_r - b_r, b_r]``.
* VDC is the transpose of HDC.

Because every branch is a 3x3 stride-1 pad-1 convolution of the same input,
the branch kernels sum into one kernel producing the same output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deanet import ops
from deanet.tensor import ConvSpec, DimensionError, Tensor

RING = (0, 1, 2, 5, 8, 7, 6, 3)
CENTER = 4
BRANCHES = ("vc", "cdc", "adc", "hdc", "vdc")
BRANCH_WEIGHT_SHAPES = {"vc": (3, 3), "cdc": (3, 3), "adc": (8,), "hdc": (3, 2), "vdc": (2, 3)}


def _cdc_matrix() -> np.ndarray:
    m = np.eye(9)
    m[:, CENTER] -= 1.0
    return m


def _adc_matrix() -> np.ndarray:
    m = np.zeros((8, 9))
    for i, tap in enumerate(RING):
        m[i, tap] += 1.0
        m[i, RING[(i + 1) % 8]] -= 1.0
    return m


def _hdc_matrix() -> np.ndarray:
    # weight order (row, pair) flattened: a_0, b_0, a_1, b_1, a_2, b_2
    m = np.zeros((6, 9))
    for r in range(3):
        a, b = 2 * r, 2 * r + 1
        m[a, 3 * r + 0] = -1.0
        m[a, 3 * r + 1] = 1.0
        m[b, 3 * r + 1] = -1.0
        m[b, 3 * r + 2] = 1.0
    return m


def _vdc_matrix() -> np.ndarray:
    # weight order (pair, column) flattened: a_0, a_1, a_2, b_0, b_1, b_2
    m = np.zeros((6, 9))
    for c in range(3):
        a, b = c, 3 + c
        m[a, 0 + c] = -1.0
        m[a, 3 + c] = 1.0
        m[b, 3 + c] = -1.0
        m[b, 6 + c] = 1.0
    return m


BRANCH_MATRICES = {
    "vc": np.eye(9),
    "cdc": _cdc_matrix(),
    "adc": _adc_matrix(),
    "hdc": _hdc_matrix(),
    "vdc": _vdc_matrix(),
}


def _equivalent(branch: str, w) -> Tensor:
    w = ops.as_tensor(w)
    wshape = BRANCH_WEIGHT_SHAPES[branch]
    if w.data.ndim != 2 + len(wshape) or w.shape[2:] != wshape:
        raise DimensionError(f"{branch} weights must be [oc, ic, {', '.join(map(str, wshape))}], got {w.shape}")
    oc, ic = w.shape[:2]
    flat = ops.reshape(w, (oc, ic, BRANCH_MATRICES[branch].shape[0]))
    return ops.reshape(ops.matmul_const(flat, BRANCH_MATRICES[branch]), (oc, ic, 3, 3))


def equivalent_kernel_cdc(cdc) -> Tensor:
    """Dense kernel of a central difference conv; taps sum to zero."""
    return _equivalent("cdc", cdc)


def equivalent_kernel_adc(adc) -> Tensor:
    """Dense kernel of an angular (clockwise ring) difference conv."""
    return _equivalent("adc", adc)


def equivalent_kernel_hdc(hdc) -> Tensor:
    """Dense kernel of a horizontal difference conv; every row sums to zero.

    ``hdc[..., r, 0]`` weighs ``x[r][1] - x[r][0]`` and ``hdc[..., r, 1]``
    weighs ``x[r][2] - x[r][1]``.  Pair weights (1, 2, 1) give Sobel.
    """
    return _equivalent("hdc", hdc)


def equivalent_kernel_vdc(vdc) -> Tensor:
    """Transpose construction of :func:`equivalent_kernel_hdc`; columns sum to zero."""
    return _equivalent("vdc", vdc)


EQUIVALENT_KERNEL = {
    "vc": lambda w: ops.as_tensor(w),
    "cdc": equivalent_kernel_cdc,
    "adc": equivalent_kernel_adc,
    "hdc": equivalent_kernel_hdc,
    "vdc": equivalent_kernel_vdc,
}


@dataclass
class DEConvParams:
    vc: Tensor
    cdc: Tensor
    adc: Tensor
    hdc: Tensor
    vdc: Tensor
    bias: Tensor

    def __post_init__(self):
        oc, ic = self.vc.shape[:2]
        for b in BRANCHES:
            t = getattr(self, b)
            expected = (oc, ic) + BRANCH_WEIGHT_SHAPES[b]
            if t.shape != expected:
                raise DimensionError(f"DEConv {b} weights {t.shape} != {expected} (only 3x3 DEConv is supported)")
        if self.bias.shape != (oc,):
            raise DimensionError(f"DEConv bias {self.bias.shape} != ({oc},)")

    @property
    def out_channels(self) -> int:
        return self.vc.shape[0]

    @property
    def in_channels(self) -> int:
        return self.vc.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {b: getattr(self, b) for b in BRANCHES + ("bias",)}

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, dtype=np.float32) -> "DEConvParams":
        return cls(
            **{b: Tensor(np.zeros((out_channels, in_channels) + s, dtype=dtype)) for b, s in BRANCH_WEIGHT_SHAPES.items()},
            bias=Tensor(np.zeros(out_channels, dtype=dtype)),
        )

    @classmethod
    def random(cls, in_channels: int, out_channels: int, rng: np.random.Generator, scale=None, dtype=np.float32):
        # default: initializer scale, keeps outputs O(10) whatever the width
        if scale is None:
            scale = 1.0 / np.sqrt(9 * in_channels)

        def draw(shape):
            return Tensor((rng.standard_normal(shape) * scale).astype(dtype))

        return cls(
            **{b: draw((out_channels, in_channels) + s) for b, s in BRANCH_WEIGHT_SHAPES.items()},
            bias=draw((out_channels,)),
        )

    def __add__(self, other: "DEConvParams") -> "DEConvParams":
        return DEConvParams(**{k: Tensor(v.data + other.tensors()[k].data) for k, v in self.tensors().items()})

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


@dataclass(frozen=True)
class FusedKernel:
    kernel: Tensor
    bias: Tensor

    def num_params(self) -> int:
        return self.kernel.size + self.bias.size


def _spec(oc: int, ic: int) -> ConvSpec:
    return ConvSpec(ic, oc, 3, 3, stride=1, padding=1)


def fused_kernel_tensor(p: DEConvParams) -> Tensor:
    """Differentiable sum of the five equivalent kernels."""
    k = None
    for b in BRANCHES:
        e = EQUIVALENT_KERNEL[b](getattr(p, b))
        k = e if k is None else ops.add(k, e)
    return k


def reparameterize(p: DEConvParams) -> FusedKernel:
    kernel = fused_kernel_tensor(p)
    return FusedKernel(Tensor(kernel.data.copy()), Tensor(p.bias.data.copy()))


def deconv_forward_unfused(x: Tensor, p: DEConvParams) -> Tensor:
    """Sum of five separate branch convolutions plus the shared bias."""
    spec = _spec(p.out_channels, p.in_channels)
    y = None
    for b in BRANCHES:
        yb = ops.conv2d(x, EQUIVALENT_KERNEL[b](getattr(p, b)), None, spec)
        y = yb if y is None else ops.add(y, yb)
    return ops.add(y, ops.reshape(p.bias, (1, -1, 1, 1)))


def deconv_forward_merged(x: Tensor, p: DEConvParams) -> Tensor:
    """Single convolution with the kernel sum built on the tape.

    Gradients still reach each branch's own weights; this is the cheap
    training path.
    """
    spec = _spec(p.out_channels, p.in_channels)
    return ops.conv2d(x, fused_kernel_tensor(p), p.bias, spec)


def deconv_forward_fused(x: Tensor, f: FusedKernel) -> Tensor:
    oc, ic = f.kernel.shape[:2]
    if f.kernel.shape[2:] != (3, 3):
        raise DimensionError(f"fused DEConv kernel must be 3x3, got {f.kernel.shape}")
    return ops.conv2d(x, f.kernel, f.bias, _spec(oc, ic))
