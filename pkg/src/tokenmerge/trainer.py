"""Parameter-efficient training: frozen backbone, AdamW on adapters and head."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .model import VitModel

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "split", "loss", "acc", "lr")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    warmup_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warm-up to ``cfg.lr``, then cosine decay to zero at the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * step / warm
    t = min((step - warm) / max(total - warm, 1), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    pass


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: TrainConfig, lr: float) -> None:
    """In-place AdamW update with bias correction.

    Weight decay is decoupled and applies to matrices only (ndim >= 2).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, node in params.items():
        p = node.value
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        if p.ndim >= 2:
            p = p * (1 - lr * cfg.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        node.value = (p - lr * update).astype(node.value.dtype, copy=False)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    acc: float
    lr: float
    tokens_per_sec: float = 0.0
    steps: int = 0


def evaluate(model: VitModel, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and top-1 accuracy, no tape recorded."""
    if len(data) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    for images, labels in data.batches(batch_size):
        logits = model(images).value
        z = logits - logits.max(-1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        total_loss += float(-lp[np.arange(len(labels)), labels].sum())
        correct += int((logits.argmax(-1) == labels).sum())
    return total_loss / len(data), correct / len(data)


def loss_on_batch(model: VitModel, images, labels) -> float:
    return float(ad.cross_entropy(model(images), labels).value)


class MetricsWriter:
    """Append-only CSV with columns epoch,split,loss,acc,lr."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = self.path.open("a", newline="")
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(CSV_COLUMNS)

    def write(self, m: EpochMetrics):
        self._w.writerow([m.epoch, m.split, f"{m.loss:.8g}", f"{m.acc:.6f}", f"{m.lr:.8g}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    best_val_acc: float
    step0_loss: float
    step_losses: list[float]


def train(
    model: VitModel,
    train_data: Dataset,
    cfg: TrainConfig,
    val_data: Dataset | None = None,
    metrics_path=None,
    on_best=None,
) -> TrainResult:
    """Train adapters and head with cross-entropy.

    ``on_best(model, epoch)`` is called whenever validation accuracy improves.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if train_data.num_classes != model.cfg.num_classes:
        raise ValueError(
            f"dataset has {train_data.num_classes} classes, model head has {model.cfg.num_classes}"
        )
    model.freeze_backbone()
    params = model.trainable_params()
    opt = AdamWState()
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    history, step_losses = [], []
    best = -1.0
    step = 0
    first_images, first_labels = next(train_data.batches(cfg.batch_size, shuffle_seed=cfg.seed))
    step0 = loss_on_batch(model, first_images, first_labels)

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            seen_tokens = 0
            losses, correct = [], 0
            for images, labels in train_data.batches(cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch):
                lr = lr_at(step + 1, cfg, steps_per_epoch)
                with ad.Tape() as tape:
                    logits = model(images)
                    loss = ad.cross_entropy(logits, labels)
                    tape.backward(loss, params.values())
                adamw_step(params, {k: n.grad for k, n in params.items()}, opt, cfg, lr)
                step += 1
                losses.append(float(loss.value) * len(labels))
                step_losses.append(float(loss.value))
                correct += int((logits.value.argmax(-1) == labels).sum())
                seen_tokens += len(labels) * model.cfg.num_tokens
            elapsed = max(time.perf_counter() - t0, 1e-9)
            m = EpochMetrics(epoch, "train", sum(losses) / len(train_data), correct / len(train_data), lr,
                             seen_tokens / elapsed, step)
            history.append(m)
            if writer:
                writer.write(m)
            if val_data is not None and len(val_data):
                vl, va = evaluate(model, val_data)
                vm = EpochMetrics(epoch, "val", vl, va, lr, steps=step)
                history.append(vm)
                if writer:
                    writer.write(vm)
                if va > best:
                    best = va
                    if on_best:
                        on_best(model, epoch)
            log.info("epoch %d loss %.4f acc %.4f lr %.2e", epoch, m.loss, m.acc, lr)
    finally:
        if writer:
            writer.close()
    return TrainResult(history, best, step0, step_losses)
