"""``deanet`` command line: synth, train, reparam, infer, bench, eval, gradcheck.

Machine-readable JSON goes to stdout, human logs to stderr.  Exit codes:
0 ok, 2 usage, 3 I/O, 4 numeric divergence, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from deanet._io import atomic_write_bytes
from deanet.archive import ArchiveError, load_weights, save_weights
from deanet.bench import run_bench
from deanet.gradcheck import DEFAULTS, SUITE, run_suite
from deanet.hazelab import HazeParams, ImageBuffer, PPMError, gen_depth, procedural_clean, psnr, read_ppm, ssim
from deanet.hazelab import synthesize_haze, write_ppm
from deanet.hazelab.haze import DEPTH_KINDS
from deanet.network import NetworkConfig, dea_net_forward, fuse_network, init_params
from deanet.tensor import DimensionError, NumericError, Tensor
from deanet.training import TrainConfig, train_loop

log = logging.getLogger("deanet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Training run settings; defaults are the desk-scale profile."""

    channels: int = 8
    blocks: tuple[int, int, int, int, int] = (1, 1, 2, 1, 1)
    crop: int = 32
    batch: int = 4
    iters: int = 2000
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown run config keys: {unknown}")
        kw = dict(doc)
        for key in ("channels", "crop", "batch", "iters", "seed"):
            if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
                raise UsageError(f"run config {key!r} must be an integer")
        for key in ("lr_init", "lr_final"):
            if key in kw and (not isinstance(kw[key], (int, float)) or isinstance(kw[key], bool)):
                raise UsageError(f"run config {key!r} must be a number")
        if "blocks" in kw:
            b = kw["blocks"]
            if not isinstance(b, list) or len(b) != 5 or not all(isinstance(v, int) and v >= 0 for v in b):
                raise UsageError("run config 'blocks' must be a list of 5 non-negative integers")
            kw["blocks"] = tuple(b)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.channels < 1 or self.batch < 1 or self.iters < 0 or self.seed < 0:
            raise UsageError("channels and batch must be >= 1; iters and seed >= 0")
        if self.crop < 4 or self.crop % 4:
            raise UsageError(f"crop must be a positive multiple of 4, got {self.crop}")
        if not 0 < self.lr_final <= self.lr_init:
            raise UsageError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")

    def network(self) -> NetworkConfig:
        return NetworkConfig(base_channels=self.channels, block_counts=self.blocks)

    def train(self) -> TrainConfig:
        return TrainConfig(lr_init=self.lr_init, lr_final=self.lr_final, batch_size=self.batch,
                           total_iters=self.iters, crop_size=self.crop, seed=self.seed)


# --------------------------------------------------------------------------
# helpers


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _finite_or_str(x: float):
    # JSON has no infinity; identical images give PSNR "inf"
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _write_json(path: Path, doc) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _parse_blocks(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"blocks must be 5 comma-separated ints, got {text!r}") from None
    if len(out) != 5 or min(out) < 0:
        raise argparse.ArgumentTypeError(f"blocks must be 5 comma-separated non-negative ints, got {text!r}")
    return out


def _load_net(path):
    params = load_weights(path)
    log.info("loaded %s: C=%d blocks=%s fused=%s", path, params.config.base_channels,
             list(params.config.block_counts), params.fused)
    return params


def _image_tensor(img: ImageBuffer) -> Tensor:
    return Tensor(img.to_float()[None])


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.beta_min < 0 or args.beta_max < args.beta_min:
        raise UsageError("need 0 <= --beta-min <= --beta-max")
    if not 0 <= args.airlight_min <= args.airlight_max <= 1:
        raise UsageError("need 0 <= --airlight-min <= --airlight-max <= 1")
    if args.per_clean < 1:
        raise UsageError("--per-clean must be >= 1")
    h, w = args.size
    if args.clean is not None:
        files = sorted(Path(args.clean).glob("*.ppm"))
        if not files:
            raise FileNotFoundError(f"no .ppm files in {args.clean}")
        sources = [(f.name, read_ppm(f).to_float()) for f in files for _ in range(args.per_clean)]
    else:
        if args.procedural < 1:
            raise UsageError("--procedural must be >= 1")
        sources = [(None, None)] * args.procedural

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (src, clean) in enumerate(sources):
        rng = np.random.default_rng([args.seed, i])
        if clean is None:
            # quantize first so the stored clean image is exactly what was hazed
            clean = ImageBuffer.from_float(procedural_clean(h, w, rng)).to_float()
        kind = args.depth if args.depth != "mixed" else DEPTH_KINDS[int(rng.integers(len(DEPTH_KINDS)))]
        depth_seed = int(rng.integers(2**31))
        beta = float(rng.uniform(args.beta_min, args.beta_max))
        airlight = float(rng.uniform(args.airlight_min, args.airlight_max))
        depth = gen_depth(kind, clean.shape[1], clean.shape[2], depth_seed)
        hazy = synthesize_haze(clean, HazeParams(airlight=airlight, beta=beta, depth=depth))
        names = {"clean": f"{i:03d}_clean.ppm", "hazy": f"{i:03d}_hazy.ppm"}
        write_ppm(ImageBuffer.from_float(clean), out / names["clean"])
        write_ppm(ImageBuffer.from_float(hazy), out / names["hazy"])
        pairs.append({"index": i, **names, "beta": beta, "airlight": airlight, "depth": kind,
                      "depth_seed": depth_seed, "source": src})
    manifest = {"version": 1, "seed": args.seed, "count": len(pairs), "pairs": pairs}
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d pairs to %s", len(pairs), out)
    _emit({"out": str(out), "pairs": len(pairs)})
    return EXIT_OK


def load_dataset(data_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(hazy, clean)`` float pairs listed in ``data_dir/manifest.json``."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    try:
        entries = manifest["pairs"]
        return [(read_ppm(root / e["hazy"]).to_float(), read_ppm(root / e["clean"]).to_float()) for e in entries]
    except (KeyError, TypeError) as e:
        raise PPMError(f"malformed manifest: {e}") from None


def cmd_train(args) -> int:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"run config is not valid JSON: {e}") from None
    run = RunConfig.from_dict(doc)
    overrides = {k: getattr(args, k) for k in ("channels", "crop", "batch", "iters", "lr_init", "lr_final", "seed")
                 if getattr(args, k) is not None}
    if args.blocks is not None:
        overrides["blocks"] = args.blocks
    if overrides:
        run = RunConfig.from_dict({**{f.name: getattr(run, f.name) for f in fields(run)},
                                   "blocks": list(run.blocks), **overrides})

    dataset = load_dataset(args.data)
    for hazy, _ in dataset:
        if min(hazy.shape[1:]) < run.crop:
            raise UsageError(f"training image {hazy.shape[2]}x{hazy.shape[1]} is smaller than crop {run.crop}")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else Path(f"{out}.loss.jsonl")
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else Path(f"{out}.ckpt")
    params = init_params(run.network(), seed=run.seed)
    log.info("training C=%d blocks=%s for %d iters on %d pairs", run.channels, list(run.blocks), run.iters,
             len(dataset))
    report = train_loop(dataset, params, run.train(), log_path=log_path,
                        checkpoint_dir=ckpt_dir if run.iters > 0 else None)
    result = {
        "weights": str(out),
        "log": str(log_path),
        "iters_run": len(report.losses),
        "initial_loss": report.losses[0] if report.losses else None,
        "final_loss": report.losses[-1] if report.losses else None,
        "checkpoints": report.checkpoints,
        "diverged": report.diverged,
    }
    if report.diverged:
        log.error("loss diverged; final weights not written, last checkpoint retained")
        _emit(result)
        return EXIT_NUMERIC
    save_weights(params, out)
    _emit(result)
    return EXIT_OK


def cmd_reparam(args) -> int:
    params = _load_net(args.weights)
    if params.fused:
        raise UsageError(f"{args.weights} is already fused; reparam needs an unfused archive")
    fused = fuse_network(params)
    save_weights(fused, args.out)
    result = {"out": str(args.out), "tensors_in": len(params.tensors), "tensors_out": len(fused.tensors),
              "bytes_in": os.path.getsize(args.weights), "bytes_out": os.path.getsize(args.out)}
    code = EXIT_OK
    if args.verify:
        h, w = args.size
        rng = np.random.default_rng(args.seed)
        worst = 0.0
        for _ in range(10):
            x = Tensor(rng.uniform(0, 1, (1, params.config.in_channels, h, w)).astype(np.float32))
            a = dea_net_forward(x, params, "unfused").data
            b = dea_net_forward(x, fused, "fused").data
            worst = max(worst, float(np.abs(a - b).max()))
        result.update({"verified": worst <= args.tol, "max_abs_diff": worst, "tol": args.tol})
        if worst > args.tol:
            log.error("verification FAILED: max |unfused - fused| = %.3g > tol %.3g (%s written anyway)",
                      worst, args.tol, args.out)
            code = EXIT_VERIFY
        else:
            log.info("verified: max |unfused - fused| = %.3g", worst)
    _emit(result)
    return code


def cmd_infer(args) -> int:
    params = _load_net(args.weights)
    if args.mode == "unfused" and params.fused:
        raise UsageError("unfused inference needs an unfused archive")
    img = read_ppm(args.input)
    if img.height % 4 or img.width % 4:
        raise UsageError(f"input is {img.width}x{img.height}; both sides must be divisible by 4, pad the image first")
    if args.mode == "fused" and not params.fused:
        params = fuse_network(params)
    x = _image_tensor(img)
    t0 = time.perf_counter()
    y = dea_net_forward(x, params, args.mode)
    ms = (time.perf_counter() - t0) * 1e3
    write_ppm(ImageBuffer.from_float(y.data[0]), args.output)
    _emit({"runtime_ms": ms, "mode": args.mode, "width": img.width, "height": img.height, "output": str(args.output)})
    return EXIT_OK


def cmd_bench(args) -> int:
    params = _load_net(args.weights)
    if params.fused:
        raise UsageError("bench times both forms and needs an unfused archive")
    h, w = args.size
    if h % 4 or w % 4:
        raise UsageError(f"bench size {h}x{w} must be divisible by 4")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    _emit(run_bench(params, h, w, repeat=args.repeat, warmup=args.warmup, seed=args.seed))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    pred = {p.name for p in pred_dir.glob("*.ppm")}
    gt = {p.name for p in gt_dir.glob("*.ppm")}
    if pred != gt or not pred:
        raise UsageError(f"filename sets differ: only in pred {sorted(pred - gt)}, only in gt {sorted(gt - pred)}")
    rows, ps, ss = [], [], []
    for name in sorted(pred):
        a = read_ppm(pred_dir / name).to_float()
        b = read_ppm(gt_dir / name).to_float()
        if a.shape != b.shape:
            raise UsageError(f"{name}: size mismatch {a.shape} vs {b.shape}")
        p, s = psnr(a, b), ssim(a, b)
        ps.append(p)
        ss.append(s)
        rows.append({"name": name, "psnr_db": _finite_or_str(p), "ssim": s})
    _emit({"images": rows, "mean_psnr_db": _finite_or_str(float(np.mean(ps))), "mean_ssim": float(np.mean(ss)),
           "count": len(rows)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtypes = ("f32", "f64") if args.dtype == "both" else (args.dtype,)
    names = args.ops.split(",") if args.ops else None
    if names:
        bad = [n for n in names if n not in SUITE]
        if bad:
            raise UsageError(f"unknown ops {bad}; choose from {sorted(SUITE)}")
    entries = run_suite(seed=args.seed, dtypes=dtypes, eps=args.eps, tol=args.tol, names=names)
    failed = sorted({f"{e.name}[{e.dtype}]" for e in entries if not e.passed})
    for e in entries:
        log.info("%-24s %s err %.2e tol %.0e %s", e.name, e.dtype, e.result.max_rel_err, e.tol,
                 "ok" if e.passed else "FAIL")
    _emit({"passed": not failed, "failed": failed, "results": [e.as_dict() for e in entries]})
    if failed:
        log.error("gradcheck failed for: %s", ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="errors only")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate paired clean/hazy PPMs")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--clean", help="directory of clean .ppm images")
    src.add_argument("--procedural", type=int, help="number of procedural clean images")
    s.add_argument("--out", required=True)
    s.add_argument("--beta-min", type=float, default=0.5)
    s.add_argument("--beta-max", type=float, default=1.5)
    s.add_argument("--airlight-min", type=float, default=0.7)
    s.add_argument("--airlight-max", type=float, default=1.0)
    s.add_argument("--depth", choices=DEPTH_KINDS + ("mixed",), default="mixed")
    s.add_argument("--per-clean", type=int, default=1, help="hazy versions per clean image (with --clean)")
    s.add_argument("--size", type=_parse_size, default=(32, 32), help="procedural image size HxW")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a synth directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="RunConfig JSON file")
    t.add_argument("--out", required=True, help="final weight archive")
    t.add_argument("--log", help="loss log path (default OUT.loss.jsonl)")
    t.add_argument("--checkpoints", help="checkpoint directory (default OUT.ckpt)")
    t.add_argument("--channels", type=int)
    t.add_argument("--blocks", type=_parse_blocks)
    t.add_argument("--crop", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--lr-init", dest="lr_init", type=float)
    t.add_argument("--lr-final", dest="lr_final", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reparam", help="fuse DEConv branches into single kernels")
    r.add_argument("--weights", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--verify", action="store_true")
    r.add_argument("--tol", type=float, default=1e-4)
    r.add_argument("--size", type=_parse_size, default=(32, 32), help="verification input size")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_reparam)

    i = sub.add_parser("infer", help="dehaze one PPM")
    i.add_argument("--weights", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--mode", choices=("fused", "unfused"), default="fused")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="time fused against unfused inference")
    b.add_argument("--weights", required=True)
    b.add_argument("--size", type=_parse_size, default=(64, 64))
    b.add_argument("--repeat", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="PSNR/SSIM between matching PPMs")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, help=f"step (default {DEFAULTS['f32'][0]} f32, {DEFAULTS['f64'][0]} f64)")
    g.add_argument("--tol", type=float, help=f"tolerance (default {DEFAULTS['f32'][1]} f32, {DEFAULTS['f64'][1]} f64)")
    g.add_argument("--dtype", choices=("f32", "f64", "both"), default="both")
    g.add_argument("--ops", help="comma-separated subset of ops")
    g.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit() -> int:
    raw = os.environ.get("DEACONV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DEACONV_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DEACONV_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except DimensionError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (OSError, ArchiveError, PPMError, json.JSONDecodeError) as e:
        log.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
