"""Soft Dice loss and voxel-count segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def soft_dice_loss(pred: np.ndarray, label: np.ndarray):
    """``1 - 2*sum(p*y) / (sum(p^2) + sum(y^2))`` and its gradient w.r.t. ``pred``.

    Sums run over every element, so a whole batch is scored as one volume.
    Both-empty inputs give loss 0 and a zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"soft_dice_loss shape mismatch: pred {pred.shape} vs label {label.shape}")
    if pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
        raise ValueError("soft_dice_loss expects predictions in [0, 1]")
    inter = float(np.sum(pred * label))
    denom = float(np.sum(pred * pred) + np.sum(label * label))
    if denom == 0.0:
        return 0.0, np.zeros_like(pred)
    loss = 1.0 - 2.0 * inter / denom
    grad = -2.0 * (label * denom - 2.0 * inter * pred) / (denom * denom)
    return loss, grad


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, label, threshold: float = 0.5) -> ConfusionCounts:
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"confusion shape mismatch: pred {pred.shape} vs label {label.shape}")
    p = pred >= threshold
    y = label > 0.5
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = c.fn + 2 * c.tp + c.fp
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def tpr(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def fpr(c: ConfusionCounts) -> float:
    # Named FPR in the reported tables but computed as FP / (TP + FP),
    # i.e. the false discovery rate.
    denom = c.tp + c.fp
    return 0.0 if denom == 0 else c.fp / denom


@dataclass
class MetricsReport:
    c_dice: float
    v_dice: float
    v_tpr: float
    v_fpr: float
    case_dice: list = field(default_factory=list)
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def as_dict(self) -> dict:
        return {"c_dice": self.c_dice, "v_dice": self.v_dice,
                "v_tpr": self.v_tpr, "v_fpr": self.v_fpr}


def aggregate_metrics(per_case: Sequence[ConfusionCounts]) -> MetricsReport:
    """Case-averaged Dice plus voxel-level Dice/TPR/FPR from summed counts."""
    per_case = list(per_case)
    if not per_case:
        raise ValueError("aggregate_metrics needs at least one case")
    total = ConfusionCounts()
    for c in per_case:
        total = total + c
    case_dice = [dice(c) for c in per_case]
    return MetricsReport(
        c_dice=float(np.mean(case_dice)),
        v_dice=dice(total),
        v_tpr=tpr(total),
        v_fpr=fpr(total),
        case_dice=case_dice,
        counts=total,
    )
