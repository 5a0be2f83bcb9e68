"""Binary segmentation metrics: IoU, precision, recall, F1 and Dice."""

from __future__ import annotations

from dataclasses import astuple, dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(*(a + b for a, b in zip(astuple(self), astuple(other))))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    iou: float
    precision: float
    recall: float
    f1: float
    dice: float

    CSV_HEADER = "iou,precision,recall,f1,dice"

    def csv_row(self) -> str:
        return ",".join(f"{v:.4f}" for v in astuple(self))


def threshold(pred, tau: float = 0.5) -> np.ndarray:
    """1 where ``pred >= tau`` (ties are positive), else 0."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {tau}")
    return (np.asarray(pred) >= tau).astype(np.uint8)


def _binary(mask, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{name} mask must contain only 0 and 1")
    return mask.astype(bool)


def confusion(pred_mask, true_mask) -> ConfusionCounts:
    p = _binary(pred_mask, "predicted")
    t = _binary(true_mask, "true")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def report(counts: ConfusionCounts) -> MetricsReport:
    """Ratios from counts. Both masks empty scores 1.0 everywhere; any other
    zero denominator scores 0.0.

    Ratios are formed exactly and rounded once, so F1 (harmonic mean of
    precision and recall) and Dice agree to the last bit.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp + fn == 0:
        return MetricsReport(1.0, 1.0, 1.0, 1.0, 1.0)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return MetricsReport(
        iou=float(_ratio(tp, tp + fp + fn)),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        dice=float(_ratio(2 * tp, 2 * tp + fp + fn)),
    )


def predict(model, image: np.ndarray) -> np.ndarray:
    """Probability map ``[H, W]`` for a single-channel image."""
    return model.forward(image[None, :, :]).data[0]


def dataset_counts(samples: Iterable, model, tau: float = 0.5) -> ConfusionCounts:
    total = ConfusionCounts()
    n = 0
    for s in samples:
        total = total + confusion(threshold(predict(model, s.image), tau), s.mask)
        n += 1
    if n == 0:
        raise ValueError("dataset_report needs at least one sample")
    return total


def dataset_report(samples: Iterable, model, tau: float = 0.5) -> MetricsReport:
    """Micro-averaged report: counts summed over samples, then one set of ratios."""
    return report(dataset_counts(samples, model, tau))
