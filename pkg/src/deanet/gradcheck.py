"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from deanet import ops
from deanet.attention import CGAParams, cga
from deanet.deconv import (BRANCH_WEIGHT_SHAPES, BRANCHES, EQUIVALENT_KERNEL, DEConvParams, deconv_forward_merged,
                           deconv_forward_unfused)
from deanet.network import DEABParams, DEBParams, FusionParams, deab_forward, deb_forward, fuse
from deanet.tensor import ConvSpec, DecisionLog, Tape, Tensor, backward

# A check where more than this fraction of perturbations straddle a kink
# says too little about the gradient and is reported as failed.
MAX_NONSMOOTH_FRACTION = 0.25


@dataclass
class GradcheckResult:
    max_rel_err: float
    checked: int
    worst: dict = field(default_factory=dict)
    nonsmooth: int = 0

    def passed(self, tol: float) -> bool:
        total = self.checked + self.nonsmooth
        if total == 0 or self.nonsmooth > MAX_NONSMOOTH_FRACTION * total:
            return False
        return self.max_rel_err <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    floor: float = 1e-4,
    seed: int = 0,
    max_elems: int | None = None,
    reference_dtype=None,
) -> GradcheckResult:
    """Compare analytic and central-difference gradients of ``sum(fn(*inputs) * r)``.

    ``r`` is a fixed random projection so every output element contributes.
    Inputs with ``requires_grad`` are checked.  The difference quotient is
    formed from the per-element output differences, accumulated in float64,
    so outputs a perturbation does not reach contribute exactly zero.

    ``reference_dtype`` evaluates the finite differences on copies of the
    inputs cast to that dtype.  Central differences of a float32 function at
    ``eps=1e-3`` carry ~1e-4 absolute rounding noise, so float32 backward
    passes are checked against a float64 evaluation of the same function.
    ``max_elems`` samples that many elements per input instead of all.

    A perturbation whose evaluation changes a discrete choice (a ReLU mask,
    a max index, an L1 sign) straddles a kink, where the difference quotient
    does not estimate the derivative.  Such elements are counted in
    ``nonsmooth`` and left out of the error.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.uniform(-1, 1, size=out.shape).astype(out.dtype)

    for t in inputs:
        if t.requires_grad:
            t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
        loss = ops.sum_all(ops.mul(out, Tensor(proj)))
    backward(tape, loss)

    proj64 = proj.astype(np.float64)
    if reference_dtype is not None:
        ref_inputs = [Tensor(t.data.astype(reference_dtype), requires_grad=t.requires_grad) for t in inputs]
    else:
        ref_inputs = list(inputs)

    def f() -> tuple[np.ndarray, bytes]:
        with DecisionLog() as dl:
            y = fn(*ref_inputs).data.astype(np.float64)
        return y, dl.fingerprint()

    _, base_fp = f()

    worst_err, checked, nonsmooth, worst = 0.0, 0, 0, {}
    for k, (t, r) in enumerate(zip(inputs, ref_inputs)):
        if not t.requires_grad:
            continue
        flat = r.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        analytic = t.grad.reshape(-1)[idx].astype(np.float64)
        numeric = np.empty(len(idx))
        smooth = np.ones(len(idx), dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi_x = float(flat[i])
            f_hi, fp_hi = f()
            flat[i] = orig - eps
            lo_x = float(flat[i])
            f_lo, fp_lo = f()
            flat[i] = orig
            smooth[j] = fp_hi == base_fp and fp_lo == base_fp
            numeric[j] = float(np.sum((f_hi - f_lo) * proj64)) / (hi_x - lo_x)
        idx, analytic, numeric = idx[smooth], analytic[smooth], numeric[smooth]
        nonsmooth += int((~smooth).sum())
        err = relative_error(analytic, numeric, floor)
        checked += len(idx)
        if err.size and err.max() > worst_err:
            j = int(err.argmax())
            worst_err = float(err[j])
            worst = {"input": k, "index": int(idx[j]), "analytic": float(analytic[j]), "numeric": float(numeric[j])}
    return GradcheckResult(worst_err, checked, worst, nonsmooth)


# --------------------------------------------------------------------------
# suite over every differentiable op and block


def _t(a, dtype) -> Tensor:
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _case_conv2d(rng, dt):
    spec = ConvSpec(4, 3, 3, 3, padding=1)
    return (lambda x, k, b: ops.conv2d(x, k, b, spec),
            [_t(rng.standard_normal((2, 4, 6, 6)), dt), _t(rng.standard_normal((3, 4, 3, 3)) * 0.3, dt),
             _t(rng.standard_normal(3), dt)])


def _case_conv2d_strided_grouped(rng, dt):
    spec = ConvSpec(4, 4, 3, 3, stride=2, padding=1, groups=2)
    return (lambda x, k, b: ops.conv2d(x, k, b, spec),
            [_t(rng.standard_normal((2, 4, 6, 6)), dt), _t(rng.standard_normal((4, 2, 3, 3)) * 0.3, dt),
             _t(rng.standard_normal(4), dt)])


def _case_conv_transpose2d(rng, dt):
    spec = ConvSpec(4, 2, 4, 4, stride=2, padding=1)
    return (lambda x, k, b: ops.conv_transpose2d(x, k, b, spec),
            [_t(rng.standard_normal((2, 4, 3, 3)), dt), _t(rng.standard_normal((4, 2, 4, 4)) * 0.3, dt),
             _t(rng.standard_normal(2), dt)])


def _unary(op, draw=None):
    def case(rng, dt):
        x = draw(rng) if draw is not None else rng.standard_normal((2, 4, 6, 6))
        return op, [_t(x, dt)]
    return case


def _binary(op, shape_b):
    def case(rng, dt):
        return op, [_t(rng.standard_normal((2, 4, 6, 6)), dt), _t(rng.standard_normal(shape_b), dt)]
    return case


def _separated_channels(rng):
    # channel values at least 0.1 apart so the arg-max is stable under perturbation
    base = np.stack([rng.permutation(4) * 0.3 for _ in range(2 * 36)]).reshape(2, 6, 6, 4)
    return base.transpose(0, 3, 1, 2) + rng.uniform(-0.05, 0.05, size=(2, 4, 6, 6))


def _case_l1(rng, dt):
    target = rng.standard_normal((2, 4, 6, 6))
    pred = target + _away_from_zero(rng, target.shape)
    return (lambda p: ops.l1_loss(p, Tensor(target.astype(dt)))), [_t(pred, dt)]


def _case_matmul_const(rng, dt):
    m = rng.standard_normal((6, 9))
    return (lambda x: ops.matmul_const(x, m)), [_t(rng.standard_normal((2, 4, 6)), dt)]


def _case_reshape(rng, dt):
    return (lambda x: ops.reshape(x, (2, 2, 2, 36))), [_t(rng.standard_normal((2, 4, 6, 6)), dt)]


def _fan_in_uniform(rng, shape, dt, fan_in=None):
    """Weights drawn like the network initializer: U(-b, b), b = 1/sqrt(fan_in)."""
    if len(shape) == 1:
        return _t(rng.uniform(-0.1, 0.1, size=shape), dt)
    bound = 1.0 / np.sqrt(fan_in or int(np.prod(shape[1:])))
    return _t(rng.uniform(-bound, bound, size=shape), dt)


def _deconv_inputs(rng, dt, ic=4, oc=4):
    ws = [_fan_in_uniform(rng, (oc, ic) + BRANCH_WEIGHT_SHAPES[b], dt, fan_in=ic * 9) for b in BRANCHES]
    return ws + [_fan_in_uniform(rng, (oc,), dt)]


def _deconv_from(ts) -> DEConvParams:
    return DEConvParams(**dict(zip(BRANCHES + ("bias",), ts)))


def _equivalent_case(branch):
    def case(rng, dt):
        shape = (3, 2) + BRANCH_WEIGHT_SHAPES[branch]
        return EQUIVALENT_KERNEL[branch], [_t(rng.standard_normal(shape), dt)]
    return case


def _case_deconv(mode):
    def case(rng, dt):
        x = _t(rng.standard_normal((2, 4, 6, 6)), dt)
        fwd = deconv_forward_unfused if mode == "unfused" else deconv_forward_merged
        return (lambda x, *ts: fwd(x, _deconv_from(ts))), [x] + _deconv_inputs(rng, dt)
    return case


def _cga_inputs(rng, dt, c=4):
    return [_fan_in_uniform(rng, s, dt) for s in CGAParams.shapes(c).values()]


def _cga_from(ts) -> CGAParams:
    return CGAParams(**dict(zip(CGAParams.shapes(4), ts)))


def _case_cga(rng, dt):
    x = _t(rng.standard_normal((2, 4, 6, 6)), dt)
    return (lambda x, *ts: cga(x, _cga_from(ts))), [x] + _cga_inputs(rng, dt)


def _block_inputs(rng, dt):
    conv = [_fan_in_uniform(rng, (4, 4, 3, 3), dt), _fan_in_uniform(rng, (4,), dt)]
    return _deconv_inputs(rng, dt) + conv


def _case_deb(rng, dt):
    x = _t(rng.standard_normal((2, 4, 6, 6)), dt)

    def fn(x, *ts):
        return deb_forward(x, DEBParams(_deconv_from(ts[:6]), ts[6], ts[7]), "unfused")
    return fn, [x] + _block_inputs(rng, dt)


def _case_deab(rng, dt):
    x = _t(rng.standard_normal((2, 4, 6, 6)), dt)

    def fn(x, *ts):
        return deab_forward(x, DEABParams(_deconv_from(ts[:6]), ts[6], ts[7], _cga_from(ts[8:])), "unfused")
    return fn, [x] + _block_inputs(rng, dt) + _cga_inputs(rng, dt)


def _case_fusion(rng, dt):
    lo = _t(rng.standard_normal((2, 4, 6, 6)), dt)
    hi = _t(rng.standard_normal((2, 4, 6, 6)), dt)
    proj = [_fan_in_uniform(rng, (4, 4, 1, 1), dt), _fan_in_uniform(rng, (4,), dt)]

    def fn(lo, hi, pk, pb, *ts):
        return fuse(lo, hi, FusionParams(_cga_from(ts), pk, pb))
    return fn, [lo, hi] + proj + _cga_inputs(rng, dt)


SUITE: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "conv2d_strided_grouped": _case_conv2d_strided_grouped,
    "conv_transpose2d": _case_conv_transpose2d,
    "relu": _unary(ops.relu, lambda rng: _away_from_zero(rng, (2, 4, 6, 6))),
    "sigmoid": _unary(ops.sigmoid),
    "scale": _unary(lambda x: ops.scale(x, -1.5)),
    "add": _binary(ops.add, (1, 4, 1, 1)),
    "sub": _binary(ops.sub, (2, 4, 6, 6)),
    "mul": _binary(ops.mul, (2, 1, 6, 6)),
    "gap_spatial": _unary(ops.gap_spatial),
    "gap_channel": _unary(ops.gap_channel),
    "gmp_channel": _unary(ops.gmp_channel, _separated_channels),
    "sum_all": _unary(ops.sum_all),
    "mean_all": _unary(ops.mean_all),
    "l1_loss": _case_l1,
    "concat_channels": _binary(ops.concat_channels, (2, 3, 6, 6)),
    "channel_shuffle2": _unary(ops.channel_shuffle2),
    "reshape": _case_reshape,
    "matmul_const": _case_matmul_const,
    "equivalent_kernel_cdc": _equivalent_case("cdc"),
    "equivalent_kernel_adc": _equivalent_case("adc"),
    "equivalent_kernel_hdc": _equivalent_case("hdc"),
    "equivalent_kernel_vdc": _equivalent_case("vdc"),
    "deconv_unfused": _case_deconv("unfused"),
    "deconv_merged": _case_deconv("merged"),
    "cga": _case_cga,
    "deb": _case_deb,
    "deab": _case_deab,
    "fusion": _case_fusion,
}

DEFAULTS = {  # dtype -> (eps, tol)
    "f32": (1e-3, 1e-3),
    "f64": (1e-5, 1e-6),
}


@dataclass
class SuiteEntry:
    name: str
    dtype: str
    result: GradcheckResult
    tol: float

    @property
    def passed(self) -> bool:
        return self.result.passed(self.tol)

    def as_dict(self) -> dict:
        return {"op": self.name, "dtype": self.dtype, "passed": self.passed, "max_rel_err": self.result.max_rel_err,
                "tol": self.tol, "checked": self.result.checked, "nonsmooth": self.result.nonsmooth}


def run_suite(seed: int = 0, dtypes=("f32", "f64"), eps: float | None = None, tol: float | None = None,
              names=None) -> list[SuiteEntry]:
    """Check every entry of :data:`SUITE` in each dtype.

    float32 gradients are compared against float64 finite differences of
    the same function; float64 gradients against float64 differences.
    """
    entries = []
    for dname in dtypes:
        d_eps, d_tol = DEFAULTS[dname]
        dt = np.float32 if dname == "f32" else np.float64
        for name in names or SUITE:
            rng = np.random.default_rng([seed, list(SUITE).index(name)])
            fn, inputs = SUITE[name](rng, dt)
            res = gradcheck(fn, inputs, eps=eps or d_eps, seed=seed,
                            reference_dtype=np.float64 if dname == "f32" else None)
            entries.append(SuiteEntry(name, dname, res, tol or d_tol))
    return entries
