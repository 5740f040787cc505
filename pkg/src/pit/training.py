"""Desk-scale training: AdamW, cosine schedule, training loop and width sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .analysis import count_flops
from .checkpoint import save_checkpoint
from .data import Dataset
from .errors import ContractError, DataError, PitError
from .io import atomic_write
from .models import Model, build, forward, toy_config
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "lr", "seconds")
SWEEP_COLUMNS = ("family", "width_scale", "flops", "params", "train_loss", "train_acc", "val_acc")


class DivergenceError(PitError):
    exit_code = 1


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * t))


def adamw_step(params: dict, grads: dict, state: dict, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0, no_decay=()) -> None:
    """In-place AdamW update. Decoupled decay ``p -= lr*wd*p`` precedes the Adam step.

    ``state`` holds ``step`` and per-parameter moment buffers ``m`` / ``v``;
    pass an empty dict on the first call. Parameters without a gradient are
    skipped.
    """
    b1, b2 = betas
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    state["step"] = t = state.get("step", 0) + 1
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: grad {g.shape} does not match parameter {p.shape}")
        if name not in m:
            m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        elif m[name].shape != p.shape:
            raise ContractError(f"{name}: optimizer state {m[name].shape} does not match {p.shape}")
        dt = p.dtype.type
        d = p.data
        if weight_decay and name not in no_decay:
            d -= dt(lr * weight_decay) * d
        m[name] = dt(b1) * m[name] + dt(1 - b1) * g
        v[name] = dt(b2) * v[name] + dt(1 - b2) * (g * g)
        d -= dt(lr) * (m[name] / dt(c1)) / (np.sqrt(v[name] / dt(c2)) + dt(eps))


def no_decay_names(model: Model) -> set:
    """Biases, norm gains, positional table and class token are not decayed."""
    return {k for k, p in model.params.items() if p.ndim == 1 or k in ("embed.pos", "embed.cls")}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: Optional[float] = None
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    seed: int = 0
    min_lr: float = 1e-5
    record_time: bool = False

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = 5e-4 * self.batch_size / 512
        if self.epochs < 1 or self.batch_size < 1 or self.base_lr <= 0 or self.weight_decay < 0:
            raise ContractError(f"invalid training config {self}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ContractError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow((r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_acc), repr(r.lr),
                        f"{r.seconds:.3f}"))
        return buf.getvalue()

    def write(self, path) -> None:
        atomic_write(path, self.to_csv().encode("utf-8"))

    @classmethod
    def parse(cls, text: str) -> "MetricsLog":
        rows = [MetricsRow(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                           float(r["val_acc"]), float(r["lr"]), float(r["seconds"]))
                for r in csv.DictReader(io.StringIO(text))]
        return cls(rows)


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # argmax picks the lowest index on ties
    return float((logits.argmax(axis=1) == labels).mean())


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(model, images[i:i + batch_size])
        out.append(logits.data)
    return np.concatenate(out)


def evaluate(model: Model, ds: Dataset, batch_size: int = 64) -> float:
    return accuracy(predict(model, ds.images, batch_size), ds.labels)


def train_step(model: Model, images: np.ndarray, labels: np.ndarray, state: dict, lr: float,
               weight_decay: float, no_decay=()):
    """One forward/backward/update; returns ``(loss, logits)``."""
    model.zero_grad()
    with Tape() as tape:
        logits, _ = forward(model, images)
        loss = T.cross_entropy(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    tape.backward(loss)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adamw_step(model.params, grads, state, lr, weight_decay=weight_decay, no_decay=no_decay)
    return value, logits.data


def _check_images(model: Model, ds: Dataset) -> None:
    cfg = model.config
    if ds.images.shape[1:] != (cfg.in_chans, cfg.image_size, cfg.image_size):
        raise DataError(f"{ds.split} images {ds.images.shape[1:]} do not match model input "
                        f"{(cfg.in_chans, cfg.image_size, cfg.image_size)}")
    if ds.num_classes > cfg.num_classes:
        raise DataError(f"dataset has {ds.num_classes} classes, model head only {cfg.num_classes}")


def train(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          out_dir=None) -> MetricsLog:
    """Seeded minibatch training with per-epoch validation.

    Every update ``k`` (1-based) uses ``cosine_lr(k, ...)``; a log row's
    ``lr`` is the rate of the epoch's final update.
    """
    _check_images(model, train_ds)
    _check_images(model, val_ds)
    n = len(train_ds)
    spe = math.ceil(n / cfg.batch_size)
    total, warm = cfg.epochs * spe, cfg.warmup_epochs * spe
    skip = no_decay_names(model)
    state: dict = {}
    mlog = MetricsLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_order(cfg.seed, epoch, n)
        loss_sum, correct = 0.0, 0
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            step += 1
            lr = cosine_lr(step, total, warm, cfg.base_lr, cfg.min_lr)
            try:
                loss, logits = train_step(model, train_ds.images[idx], train_ds.labels[idx],
                                          state, lr, cfg.weight_decay, skip)
            except DivergenceError as e:
                raise DivergenceError(f"epoch {epoch} step {step}: {e}") from None
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == train_ds.labels[idx]).sum())
        row = MetricsRow(epoch, loss_sum / n, correct / n, evaluate(model, val_ds, cfg.batch_size),
                         cosine_lr(step, total, warm, cfg.base_lr, cfg.min_lr),
                         time.perf_counter() - start if cfg.record_time else 0.0)
        mlog.rows.append(row)
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f lr %.2e",
                 epoch, row.train_loss, row.train_acc, row.val_acc, row.lr)
    if out_dir is not None:
        out = Path(out_dir)
        mlog.write(out / "metrics.csv")
        save_checkpoint(model, out / "checkpoint")
    return mlog


def overfit_probe(model: Model, images: np.ndarray, labels: np.ndarray, steps: int = 200,
                  lr: float = 2e-4, weight_decay: float = 0.0) -> list:
    """Repeated AdamW steps on one fixed batch.

    Returns ``steps + 1`` losses: the loss before each update, then the loss
    after the last one.
    """
    state: dict = {}
    skip = no_decay_names(model)
    losses = [train_step(model, images, labels, state, lr, weight_decay, skip)[0] for _ in range(steps)]
    losses.append(T.cross_entropy(forward(model, images)[0], labels).item())
    return losses


@dataclass
class SweepRow:
    family: str
    width_scale: float
    flops: int
    params: int
    train_loss: float
    train_acc: float
    val_acc: float


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow((r.family, repr(float(r.width_scale)), r.flops, r.params, repr(r.train_loss),
                    repr(r.train_acc), repr(r.val_acc)))
    return buf.getvalue()


def sweep(width_scales: Sequence[float], train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          families=("vit", "pit"), depth_scale: float = 1.0, out_path=None) -> list:
    """Train matched toy ViT/PiT configs at each width; one row per (family, scale)."""
    if len(width_scales) < 2:
        raise ContractError("a sweep needs at least two width scales")
    rows = []
    for scale in width_scales:
        flops = {}
        for fam in families:
            config = toy_config(scale, depth_scale, train_ds.image_size, fam, train_ds.num_classes)
            model = build(config, cfg.seed)
            mlog = train(model, train_ds, val_ds, cfg)
            last = mlog.rows[-1]
            flops[fam] = count_flops(config).total_macs
            rows.append(SweepRow(fam, scale, flops[fam], model.num_params(),
                                 last.train_loss, last.train_acc, last.val_acc))
        if "vit" in flops and "pit" in flops:
            log.info("width %g: pit/vit FLOPs ratio %.3f", scale, flops["pit"] / flops["vit"])
    if out_path is not None:
        atomic_write(out_path, sweep_csv(rows).encode("utf-8"))
    return rows
