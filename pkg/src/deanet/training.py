"""L1 training with Adam, cosine annealing and crop/rotate/flip augmentation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from deanet import ops
from deanet._io import atomic_write_bytes
from deanet.archive import save_weights
from deanet.network import NetworkParams, dea_net_forward
from deanet.tensor import NumericError, Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    total_iters: int = 2000
    crop_size: int = 32
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if self.crop_size <= 0 or self.crop_size % 4:
            raise ValueError(f"crop_size must be a positive multiple of 4, got {self.crop_size}")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and total_iters >= 0")


l1_loss = ops.l1_loss


def cosine_lr(it: int, config: TrainConfig) -> float:
    """Cosine annealing from ``lr_init`` at 0 to ``lr_final`` at ``total_iters``."""
    if not 0 <= it <= config.total_iters:
        raise ValueError(f"iteration {it} outside [0, {config.total_iters}]")
    if config.total_iters == 0:
        return config.lr_init
    cos = math.cos(math.pi * it / config.total_iters)
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (1 + cos)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place.

    Raises NumericError before touching anything if a gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; parameters left untouched")
    state.t += 1
    bc1 = 1 - beta1**state.t
    bc2 = 1 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)


# --------------------------------------------------------------------------
# data


def random_crop(hazy: np.ndarray, clean: np.ndarray, size: int, rng: np.random.Generator):
    """Same ``size x size`` window from a ``(3, H, W)`` pair."""
    _, h, w = clean.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return hazy[:, y : y + size, x : x + size], clean[:, y : y + size, x : x + size]


def apply_transform(patch: np.ndarray, rot: int, flip: int) -> np.ndarray:
    """``rot`` quarter turns then flip 0=none, 1=horizontal, 2=vertical on a ``(C, H, W)`` patch."""
    out = np.rot90(patch, k=rot, axes=(1, 2))
    if flip == 1:
        out = out[:, :, ::-1]
    elif flip == 2:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment(pair: tuple[np.ndarray, np.ndarray], rng: np.random.Generator):
    """Apply one random rotation x flip from the 12-element set to both patches."""
    hazy, clean = pair
    for p in (hazy, clean):
        if p.shape[1] != p.shape[2]:
            raise ValueError(f"rotation needs square patches, got {p.shape[1]}x{p.shape[2]}")
    rot = int(rng.integers(0, 4))
    flip = int(rng.integers(0, 3))
    return apply_transform(hazy, rot, flip), apply_transform(clean, rot, flip)


def sample_batch(dataset, config: TrainConfig, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    hazy, clean = [], []
    for _ in range(config.batch_size):
        h, c = dataset[int(rng.integers(0, len(dataset)))]
        h, c = augment(random_crop(h, c, config.crop_size, rng), rng)
        hazy.append(h)
        clean.append(c)
    return Tensor(np.stack(hazy).astype(np.float32)), Tensor(np.stack(clean).astype(np.float32))


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainingReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    diverged: bool = False

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    def tail_mean(self, frac: float = 0.1) -> float:
        k = max(1, int(len(self.losses) * frac))
        return float(np.mean(self.losses[-k:]))

    def head_mean(self, frac: float = 0.1) -> float:
        k = max(1, int(len(self.losses) * frac))
        return float(np.mean(self.losses[:k]))


def train_step(params: NetworkParams, hazy: Tensor, clean: Tensor, state: AdamState, lr: float, config: TrainConfig):
    tensors = params.parameters()
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        pred = dea_net_forward(hazy, params, mode="merged")
        loss = l1_loss(pred, clean)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    backward(tape, loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    adam_step(tensors, grads, state, lr, config.beta1, config.beta2, config.epsilon)
    return value


def train_loop(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    params: NetworkParams,
    config: TrainConfig,
    log_path: Optional[Path] = None,
    checkpoint_dir: Optional[Path] = None,
) -> TrainingReport:
    """Train ``params`` in place on ``(hazy, clean)`` float arrays shaped ``(3, H, W)``.

    Writes one JSON line ``{"iter", "lr", "loss"}`` per step to ``log_path``
    (renamed into place when the loop ends), and a weight archive plus a
    ``.json`` sidecar to ``checkpoint_dir`` every ``max(1, total_iters // 10)``
    steps.  On a non-finite loss the loop stops with ``report.diverged`` set;
    earlier checkpoints stay on disk.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if params.fused:
        raise ValueError("training needs unfused (branch) parameters")
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_params(params.parameters())
    report = TrainingReport()
    cadence = max(1, config.total_iters // 10)
    tmp_log = Path(f"{log_path}.tmp") if log_path is not None else None
    log_file = open(tmp_log, "w") if tmp_log is not None else None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        for it in range(config.total_iters):
            lr = cosine_lr(it, config)
            hazy, clean = sample_batch(dataset, config, rng)
            try:
                loss = train_step(params, hazy, clean, state, lr, config)
            except NumericError as e:
                log.error("diverged at iter %d: %s", it, e)
                report.diverged = True
                break
            report.losses.append(loss)
            report.lrs.append(lr)
            if log_file is not None:
                log_file.write(json.dumps({"iter": it, "lr": lr, "loss": loss}) + "\n")
            if config.log_every and it % max(1, config.total_iters // 20) == 0:
                log.info("iter %d lr %.3g loss %.5f", it, lr, loss)
            if checkpoint_dir is not None and (it + 1) % cadence == 0:
                report.checkpoints.append(_checkpoint(params, Path(checkpoint_dir), it + 1, loss, config))
    finally:
        if log_file is not None:
            log_file.close()
            os.replace(tmp_log, log_path)
        for t in params.parameters():
            t.requires_grad = False
            t.grad = None
    return report


def _checkpoint(params: NetworkParams, directory: Path, it: int, loss: float, config: TrainConfig) -> str:
    path = directory / f"iter_{it:07d}.deaw"
    save_weights(params, path)
    meta = {"iter": it, "loss": loss, "train_config": asdict(config), "block_counts": list(params.config.block_counts),
            "channels": params.config.base_channels}
    atomic_write_bytes(path.with_suffix(".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return str(path)
