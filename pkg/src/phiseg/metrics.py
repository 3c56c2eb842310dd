"""Binary segmentation metrics: overlap scores and average symmetric surface distance."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from .tensor import ShapeError

THRESHOLD = 0.5
CSV_FIELDS = ("dataset", "split", "sample_id", "iou", "dice", "acc", "pre", "rec", "f1", "assd")


@dataclass
class MetricsReport:
    iou: float
    dice: float
    acc: float
    pre: float
    rec: float
    f1: float
    assd: float

    def values(self) -> tuple[float, ...]:
        return astuple(self)

    @classmethod
    def mean(cls, reports: list["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValueError("cannot average an empty list of reports")
        cols = np.array([r.values() for r in reports])
        return cls(*(float(v) for v in cols.mean(axis=0)))


def binarize(pred: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def confusion(pred_bin: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    p = np.asarray(pred_bin).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"metrics: prediction {p.shape} vs ground truth {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return tp, fp, fn, tn


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels on the image border count as touching background.
    """
    m = np.pad(np.asarray(mask).astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def assd(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    """Average symmetric surface distance in pixels.

    Empty masks give the image-diagonal sentinel sqrt(H^2 + W^2).
    """
    a = np.asarray(pred_bin).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"assd: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        H, W = a.shape[-2:]
        return math.sqrt(H * H + W * W)
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    # exactly rounded sum, so the result does not depend on summation order
    return math.fsum(np.concatenate([d.min(axis=1), d.min(axis=0)])) / (len(pa) + len(pb))


def metrics(pred_bin: np.ndarray, gt: np.ndarray) -> MetricsReport:
    pred_bin = np.asarray(pred_bin).squeeze()
    gt = np.asarray(gt).squeeze()
    tp, fp, fn, tn = confusion(pred_bin, gt)
    total = tp + fp + fn + tn
    both_empty = tp + fp + fn == 0
    iou = tp / (tp + fp + fn) if not both_empty else 1.0
    dice = 2 * tp / (2 * tp + fp + fn) if not both_empty else 1.0
    acc = (tp + tn) / total
    pre = tp / (tp + fp) if tp + fp else (1.0 if both_empty else 0.0)
    rec = tp / (tp + fn) if tp + fn else (1.0 if both_empty else 0.0)
    f1 = dice  # 2PR/(P+R) reduces to the Dice ratio on counts
    dist = 0.0 if both_empty else assd(pred_bin, gt)
    return MetricsReport(iou, dice, acc, pre, rec, f1, dist)


def csv_row(dataset: str, split: str, sample_id: str, r: MetricsReport) -> str:
    return ",".join([dataset, split, sample_id] + [f"{v:.6f}" for v in r.values()])


def csv_header() -> str:
    return ",".join(CSV_FIELDS)


