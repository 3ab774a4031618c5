"""SGD training in exact, QAT and FQT modes."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from fqtlab.data import Dataset
from fqtlab.net import Network, QuantScheme, backward_fqt, backward_qat, forward_exact, forward_quantized
from fqtlab.rng import Substream

MODES = ("exact", "qat", "fqt")


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (32,)
    scheme: QuantScheme = QuantScheme()
    mode: str = "fqt"
    lr: float = 0.05
    schedule: str = "cosine"
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    warmup_epochs: int = 0
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    diverge_loss: float = 1e4  # mean loss above this counts as divergence

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be constant or cosine")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_at(self, step: int, total: int, warmup: int) -> float:
        if step < warmup:
            return self.lr * (step + 1) / warmup
        if self.schedule == "constant":
            return self.lr
        frac = (step - warmup) / max(total - warmup, 1)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    status: str
    wall_time: float = 0.0


@dataclass
class TrainResult:
    net: Network
    rows: list = field(default_factory=list)
    status: str = "ok"

    @property
    def final(self) -> EpochRow:
        return self.rows[-1]


def _forward(net, x, cfg):
    if cfg.mode == "exact":
        return forward_exact(net, x)
    return forward_quantized(net, x, cfg.scheme)


def _smoothed(y, eps):
    if eps == 0.0:
        return y
    return y * (1.0 - eps) + eps / y.shape[1]


def mean_loss_and_grad(logits, y):
    """Mean cross-entropy against (possibly smoothed) targets and its gradient."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    return -float(np.sum(y * log_p)) / n, (np.exp(log_p) - y) / n


def evaluate(net: Network, ds: Dataset, cfg: TrainConfig):
    """(mean loss, accuracy) under the mode's forward pass."""
    with np.errstate(over="ignore", invalid="ignore"):
        logits, _ = _forward(net, ds.features, cfg)
        loss, _ = mean_loss_and_grad(logits, ds.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.class_ids()))
    return loss, acc


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset, wall_time: bool = False, log=None) -> TrainResult:
    net = Network.mlp([train_set.dims, *cfg.hidden, train_set.n_classes], seed=cfg.seed)
    params = [None if p is None else p.copy() for p in net.params]
    velocity = [None if p is None else np.zeros_like(p) for p in params]
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    result = TrainResult(net)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        status = "ok"
        for x, y in train_set.batches(cfg.batch_size, epoch, cfg.seed):
            cur = net.with_params(params)
            try:
                with np.errstate(over="raise", invalid="raise"):
                    logits, tape = _forward(cur, x, cfg)
                    loss, top = mean_loss_and_grad(logits, _smoothed(y, cfg.label_smoothing))
                    if cfg.mode == "fqt":
                        grads = backward_fqt(cur, tape, top, cfg.scheme, Substream(cfg.seed, step))
                    else:
                        grads = backward_qat(cur, tape, top)
            except (FloatingPointError, ValueError):
                status = "diverge"
                break
            if not math.isfinite(loss) or loss > cfg.diverge_loss:
                status = "diverge"
                break
            lr = cfg.lr_at(step, total, warmup)
            for i, g in enumerate(grads.params):
                if g is None:
                    continue
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * params[i]
                velocity[i] = cfg.momentum * velocity[i] + g
                params[i] = params[i] - lr * velocity[i]
            step += 1
        if status == "ok" and not all(p is None or np.all(np.isfinite(p)) for p in params):
            status = "diverge"
        net = net.with_params(params) if status == "ok" else net
        if status == "diverge":
            row = EpochRow(epoch + 1, math.nan, math.nan, math.nan, math.nan, "diverge", time.perf_counter() - t0)
        else:
            tl, ta = evaluate(net, train_set, cfg)
            vl, va = evaluate(net, val_set, cfg)
            row = EpochRow(epoch + 1, tl, ta, vl, va, status, time.perf_counter() - t0)
        result.rows.append(row)
        if log is not None:
            log(row)
        if status == "diverge":
            result.status = "diverge"
            break
    result.net = net
    return result
