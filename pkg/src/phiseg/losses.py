"""Phase-integrated loss, soft IoU loss and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spectral as S
from . import tensor as T
from .tensor import ShapeError, Tensor

IOU_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"need alpha, beta >= 0 with alpha + beta > 0, got {self}")


def unwrapped_phases(x: Tensor) -> tuple[Tensor, Tensor]:
    """Phase spectrum of each image, unwrapped along rows and along columns."""
    ph = S.phase(S.dft2(x))
    return S.unwrap_axis(ph, "row"), S.unwrap_axis(ph, "col")


def _frobenius(d: Tensor) -> Tensor:
    """Per-image Frobenius norm over the last two axes -> shape (B,)."""
    sq = T.sum_(T.square(d), axis=(1, 2, 3))
    return T.sqrt(sq)


def phase_loss(phi_masks: list[Tensor], gt: Tensor) -> Tensor:
    """Sum over stages of the Frobenius distance between unwrapped phase
    spectra of each phi-mask and of the ground truth resized to that stage,
    averaged over the batch. The ground-truth branch carries no gradient."""
    if not phi_masks:
        raise ShapeError("phase_loss needs at least one stage mask")
    gt = T.as_tensor(gt)
    B = gt.shape[0]
    total = None
    for m in phi_masks:
        if m.shape[0] != B or m.shape[1] != 1:
            raise ShapeError(f"stage mask {m.shape} does not match ground truth {gt.shape}")
        with T.no_grad():
            g = gt if m.shape[2:] == gt.shape[2:] else T.resize_bilinear(gt, m.shape[2:])
            gk, gl = unwrapped_phases(g)
        pk, pl = unwrapped_phases(m)
        term = T.add(_frobenius(T.sub(pk, gk)), _frobenius(T.sub(pl, gl)))
        total = term if total is None else T.add(total, term)
    return T.mul(T.sum_(total), 1.0 / B)


def iou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - soft IoU with epsilon smoothing, averaged over the batch."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"iou_loss: {pred.shape} vs {gt.shape}")
    B = pred.shape[0]
    axes = tuple(range(1, pred.data.ndim))
    inter = T.sum_(T.mul(pred, gt), axis=axes)
    union = T.sub(T.add(T.sum_(pred, axis=axes), T.sum_(gt, axis=axes)), inter)
    s = T.div(T.add(inter, IOU_EPS), T.add(union, IOU_EPS))
    return T.sub(1.0, T.mul(T.sum_(s), 1.0 / B))


def total_loss(phi_masks: list[Tensor], pred: Tensor, gt: Tensor,
               w: LossWeights = LossWeights()) -> Tensor:
    ls = T.mul(iou_loss(pred, gt), w.beta)
    if w.alpha == 0:
        return ls
    return T.add(T.mul(phase_loss(phi_masks, gt), w.alpha), ls)


def loss_parts(phi_masks, pred, gt, w: LossWeights = LossWeights()) -> dict[str, float]:
    with T.no_grad():
        lp = phase_loss(phi_masks, gt).item()
        ls = iou_loss(pred, gt).item()
    return {"phase": lp, "iou": ls, "total": w.alpha * lp + w.beta * ls}


def is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))
