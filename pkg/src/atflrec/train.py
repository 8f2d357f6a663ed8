"""Adam fine-tuning with warmup + linear decay, micro-batch accumulation and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, DivergenceError, ScheduleRangeError, TrainingContractError, UndefinedMetricError
from .metrics import auc
from .model import ATFLRec, collate, score_samples
from .tensor import Tensor, backward, zero_grad

log = logging.getLogger(__name__)

SCHEDULES = ("linear", "step")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    warmup_iters: int = 50
    warmup_floor: float = 1e-9
    batch_size: int = 8
    accum_every: int = 4
    epochs: int | None = None  # None: 50 when k_shot <= 100, else 30
    seed: int = 0
    k_shot: int = 500
    patience: int = 10
    schedule: str = "linear"
    step_gamma: float = 0.5
    step_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1 or self.accum_every < 1 or (self.epochs is not None and self.epochs < 1):
            raise ConfigError("batch_size, accum_every and epochs must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {', '.join(SCHEDULES)}")
        if self.initial_lr <= 0 or self.warmup_floor < 0:
            raise ConfigError("learning rates must be positive")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 50 if self.k_shot <= 100 else 30

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_every

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil((n // self.batch_size) / self.accum_every)

    def total_iters(self, n: int) -> int:
        return self.n_epochs * self.steps_per_epoch(n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(iteration: int, cfg: TrainConfig, total_iters: int) -> float:
    """Learning rate for optimizer step ``iteration`` (0-based).

    Linear warmup from ``warmup_floor`` (step 0) to ``initial_lr`` (step
    ``warmup_iters``), then linear decay to 0 at ``total_iters``; the step
    schedule instead multiplies by ``step_gamma`` every ``step_every`` steps
    after warmup.  Exact rational arithmetic, rounded once to float.
    """
    w, T = cfg.warmup_iters, total_iters
    if w >= T:
        raise ConfigError(f"warmup_iters ({w}) must be below total_iters ({T})")
    if not 0 <= iteration <= T:
        raise ScheduleRangeError(f"iteration {iteration} outside [0, {T}]")
    lr0, floor = Fraction(cfg.initial_lr), Fraction(cfg.warmup_floor)
    if iteration <= w:
        t = Fraction(iteration, w)
        return float(floor + (lr0 - floor) * t)
    if cfg.schedule == "step":
        if iteration == T:
            return 0.0
        return float(lr0 * Fraction(cfg.step_gamma) ** ((iteration - w) // cfg.step_every))
    return float(lr0 * Fraction(T - iteration, T - w))


class Adam:
    """Adam with bias-corrected moments (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        if not params:
            raise ConfigError("no trainable parameters")
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise TrainingContractError(f"no gradient for {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def grad_norm(params: dict[str, Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)))


def train_step(model: ATFLRec, micro_batches: Sequence, adam: Adam, lr: float, n_effective: int | None = None):
    """Accumulate summed BCE over the micro-batches, scale by ``1/n``, take one step.

    Returns (mean loss, gradient norm).
    """
    params = adam.params
    zero_grad(params.values())
    n = n_effective or sum(len(b) for b in micro_batches)
    total = 0.0
    for b in micro_batches:
        loss = F.bce_with_logits(model.logits(b, training=True), b.labels, reduction="sum") * (1.0 / n)
        backward(loss)
        total += loss.item()
    gn = grad_norm(params)
    adam.step(lr)
    return total, gn


@dataclass
class TrainHistory:
    steps: list[tuple[int, float, float, float]] = field(default_factory=list)  # iter, lr, loss, grad_norm
    epochs: list[tuple[int, float]] = field(default_factory=list)  # epoch, validation AUC
    best_epoch: int = -1
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss", "grad_norm"])
            for it, lr, loss, gn in self.steps:
                w.writerow([it, repr(lr), repr(loss), repr(gn)])

    def write_epochs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "val_auc"])
            for ep, a in self.epochs:
                w.writerow([ep, repr(a)])

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.steps.append((int(row["iter"]), float(row["lr"]), float(row["loss"]), float(row["grad_norm"])))
        return h


@dataclass
class TrainResult:
    model: ATFLRec
    history: TrainHistory
    seconds: float


def _snapshot(model: ATFLRec) -> dict[str, np.ndarray]:
    state = {**model.trainable_parameters(), **model.buffers()}
    return {k: t.data.copy() for k, t in state.items()}


def _restore(model: ATFLRec, snap: dict[str, np.ndarray]) -> None:
    state = {**model.trainable_parameters(), **model.buffers()}
    for k, arr in snap.items():
        state[k].data[...] = arr


def validation_auc(model: ATFLRec, samples: Sequence) -> float:
    if not samples:
        return float("nan")
    try:
        return auc(score_samples(model, samples), [s.label for s in samples])
    except UndefinedMetricError:
        return float("nan")


def train(model: ATFLRec, train_samples: Sequence, val_samples: Sequence, cfg: TrainConfig) -> TrainResult:
    """Fine-tune the variant's trainable parameters in place.

    Each epoch shuffles with ``default_rng([seed, epoch])``, cuts
    ``floor(N / batch_size)`` micro-batches (the remainder is dropped) and
    steps once per ``accum_every`` micro-batches; a trailing partial group
    still steps, normalized by its own sample count.  The parameters with
    the best validation AUC are restored at the end.
    """
    start = time.perf_counter()
    n = len(train_samples)
    n_micro = n // cfg.batch_size
    if n_micro == 0:
        raise TrainingContractError(f"{n} training samples cannot fill one batch of {cfg.batch_size}")
    params = model.trainable_parameters()
    adam = Adam(params)
    total = cfg.total_iters(n)
    if cfg.warmup_iters >= total:
        raise ConfigError(f"warmup_iters ({cfg.warmup_iters}) must be below total_iters ({total})")
    checksum = model.frozen_checksum()
    with_audio = model.cfg.variant.uses_audio

    hist = TrainHistory()
    best_auc, best_snap, stale = -math.inf, None, 0
    it = 0
    for epoch in range(cfg.n_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        micro = [
            collate([train_samples[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]], with_audio)
            for b in range(n_micro)
        ]
        for g in range(0, n_micro, cfg.accum_every):
            group = micro[g : g + cfg.accum_every]
            lr = lr_at(it, cfg, total)
            loss, gn = train_step(model, group, adam, lr)
            if not math.isfinite(loss):
                raise DivergenceError(it, loss)
            hist.steps.append((it, lr, loss, gn))
            it += 1
        val = validation_auc(model, val_samples)
        hist.epochs.append((epoch, val))
        log.info("epoch %d: loss %.4f val AUC %.4f", epoch, hist.steps[-1][2], val)
        if not val_samples:
            continue
        if val > best_auc:
            best_auc, best_snap, stale = val, _snapshot(model), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                hist.stopped_early = True
                break
    if best_snap is not None:
        _restore(model, best_snap)
    if model.frozen_checksum() != checksum:
        raise TrainingContractError("frozen base weights changed during training")
    zero_grad(params.values())
    return TrainResult(model, hist, time.perf_counter() - start)
