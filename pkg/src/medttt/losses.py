"""Batch-level Dice + cross-entropy loss and confusion-matrix metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

PROB_CLAMP = 1e-7
CSV_HEADER = "dataset,split,setting,miou,dsc,acc,spe,sen"


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def _targets(targets, shape) -> Tensor:
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=np.float64))
    if t.shape != tuple(shape):
        raise tt.ShapeError(f"probs {tuple(shape)} and targets {t.shape} differ")
    return t


def bce_loss(probs, targets) -> Tensor:
    """Mean binary cross-entropy over every pixel of the batch."""
    p = tt.clip(tt._as_tensor(probs), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = _targets(targets, p.shape)
    ll = tt.add(tt.mul(t, tt.log(p)), tt.mul(tt.sub(1.0, t), tt.log(tt.sub(1.0, p))))
    return tt.neg(tt.mean(ll))


def dice_loss(probs, targets, epsilon: float = 1e-6) -> Tensor:
    """1 - 2 sum(p t) / (sum(p + t) + eps), sums over the whole batch."""
    p = tt._as_tensor(probs)
    t = _targets(targets, p.shape)
    inter = tt.sum(tt.mul(p, t))
    total = tt.add(tt.sum(tt.add(p, t)), epsilon)
    return tt.sub(1.0, tt.div(tt.mul(inter, 2.0), total))


def combined_loss(probs, targets, cfg: LossConfig | None = None) -> Tensor:
    """(1 - alpha) * BCE + alpha * Dice, each aggregated over the batch as a whole."""
    cfg = cfg or LossConfig()
    p = tt._as_tensor(probs)
    ce = bce_loss(p, targets)
    dl = dice_loss(p, targets, cfg.epsilon)
    return tt.add(tt.mul(ce, 1.0 - cfg.alpha), tt.mul(dl, cfg.alpha))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def confusion(pred_probs, targets, threshold: float = 0.5) -> ConfusionMatrix:
    p = np.asarray(getattr(pred_probs, "data", pred_probs), dtype=np.float64)
    t = np.asarray(getattr(targets, "data", targets))
    if p.shape != t.shape:
        raise tt.ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    pred = p >= threshold
    gt = t > 0.5
    return ConfusionMatrix(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


@dataclass(frozen=True)
class MetricsReport:
    miou: float
    dsc: float
    acc: float
    spe: float
    sen: float

    def csv_row(self, dataset: str, split: str, setting: str) -> str:
        vals = ",".join(f"{v:.2f}" for v in (self.miou, self.dsc, self.acc, self.spe, self.sen))
        return f"{dataset},{split},{setting},{vals}"


def _ratio(num: int, den: int, absent_ok: bool) -> float:
    # zero denominator: the class is absent; perfect if nothing was predicted for it
    if den == 0:
        return 1.0 if absent_ok else 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Percentages from a confusion matrix.

    A ratio with a zero denominator means its class is absent from the
    target; it scores 100 when nothing was predicted for that class and 0
    otherwise.
    """
    if cm.total <= 0:
        raise MetricsError("cannot compute metrics from an empty confusion matrix")
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    acc = (tp + tn) / cm.total
    sen = _ratio(tp, tp + fn, fp == 0)
    spe = _ratio(tn, tn + fp, fn == 0)
    dsc = _ratio(2 * tp, 2 * tp + fp + fn, True)
    iou_fg = _ratio(tp, tp + fp + fn, True)
    iou_bg = _ratio(tn, tn + fn + fp, True)
    return MetricsReport(
        miou=100.0 * (iou_fg + iou_bg) / 2.0,
        dsc=100.0 * dsc,
        acc=100.0 * acc,
        spe=100.0 * spe,
        sen=100.0 * sen,
    )


def dice_score(probs, targets, threshold: float = 0.5) -> float:
    """Dice coefficient (fraction, not percent) of thresholded predictions."""
    return metrics(confusion(probs, targets, threshold)).dsc / 100.0
