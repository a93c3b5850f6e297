"""Outer training loop (SGD with momentum) and split evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .data import SegmentationSample, batches
from .losses import ConfusionMatrix, LossConfig, combined_loss, confusion, metrics, MetricsReport
from .model import Model, save_checkpoint

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = "epoch,train_loss,val_dice,lr"


class TrainingAborted(RuntimeError):
    pass


@dataclass
class SGD:
    """SGD with heavy-ball momentum: v = mu v + g; p -= lr v.

    Gradients are first rescaled to global L2 norm ``clip_norm`` when they
    exceed it (``None`` disables clipping).
    """

    lr: float = 1e-2
    momentum: float = 0.9
    clip_norm: float | None = 1.0

    def __post_init__(self):
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: Model, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {n: g * (self.clip_norm / norm) for n, g in grads.items()}
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            model.set_param(name, model.params[name].data - lr * v)


def lr_at(epoch: int, epochs: int, base_lr: float, decay_at: float = 0.8, factor: float = 0.1) -> float:
    """Step schedule: ``base_lr`` until ``decay_at`` of the run, then ``base_lr * factor``."""
    return base_lr * (factor if epoch >= math.floor(decay_at * epochs) else 1.0)


def train_step(model: Model, images: np.ndarray, masks: np.ndarray, loss_cfg: LossConfig) -> tuple[float, dict[str, np.ndarray]]:
    out = model(images)
    loss = combined_loss(out.probs, masks, loss_cfg)
    tt.backward(loss)
    grads = {}
    for name, p in model.params.items():
        grads[name] = p.grad.data.copy() if p.grad is not None else np.zeros(p.shape)
        p.grad = None
    return loss.item(), grads


def evaluate(model: Model, samples: Sequence[SegmentationSample], batch_size: int = 8) -> ConfusionMatrix:
    """Aggregate confusion matrix over ``samples`` in their given order."""
    cm = ConfusionMatrix()
    with tt.no_grad():
        for imgs, masks, _ in batches(samples, batch_size, seed=0, shuffle=False):
            cm = cm + confusion(model(imgs).probs, masks)
    return cm


def evaluate_metrics(model: Model, samples: Sequence[SegmentationSample], batch_size: int = 8) -> MetricsReport:
    return metrics(evaluate(model, samples, batch_size))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss:.10f},{self.val_dice:.10f},{self.lr:.6g}"


def fit(
    model: Model,
    train: Sequence[SegmentationSample],
    val: Sequence[SegmentationSample],
    epochs: int,
    batch_size: int = 8,
    lr: float = 1e-2,
    momentum: float = 0.9,
    clip_norm: float | None = 1.0,
    seed: int = 0,
    augment: str = "none",
    loss_cfg: LossConfig | None = None,
    checkpoint_path: Path | None = None,
    target_val_dice: float | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> list[EpochRecord]:
    """Train for ``epochs`` epochs, keeping the best-validation checkpoint.

    Stops early once validation Dice reaches ``target_val_dice`` (if given).
    A non-finite loss aborts the run; the last good checkpoint stays on disk.
    """
    loss_cfg = loss_cfg or LossConfig()
    opt = SGD(lr, momentum, clip_norm)
    history: list[EpochRecord] = []
    best = -1.0
    for epoch in range(epochs):
        cur_lr = lr_at(epoch, epochs, lr)
        losses, weights = [], []
        for imgs, masks, _ in batches(train, batch_size, seed, epoch, augment):
            try:
                loss, grads = train_step(model, imgs, masks, loss_cfg)
            except tt.NumericError as exc:
                raise TrainingAborted(f"non-finite value in epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingAborted(f"non-finite loss or gradient in epoch {epoch}")
            opt.step(model, grads, cur_lr)
            losses.append(loss)
            weights.append(len(imgs))
        train_loss = float(np.dot(losses, weights) / np.sum(weights))
        val_dice = evaluate_metrics(model, val, batch_size).dsc / 100.0
        rec = EpochRecord(epoch, train_loss, val_dice, cur_lr)
        history.append(rec)
        log.info("epoch %d loss %.5f val dice %.4f", epoch, train_loss, val_dice)
        if on_epoch is not None:
            on_epoch(rec)
        if val_dice > best:
            best = val_dice
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        if target_val_dice is not None and val_dice >= target_val_dice:
            break
    return history
