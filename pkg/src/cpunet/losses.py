"""Training objective (BCE + Dice + KL) and overlap metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, TrainingAbort

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    dice: float
    kl: float
    total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.bce, self.dice, self.kl, self.total))


def _target(target, like: Tensor) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if t.shape != like.shape:
        if t.size == like.size:
            return ad.reshape(t, like.shape)
        raise DimensionError(f"prediction {like.shape} and target {t.shape} differ")
    return t


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    t = _target(target, pred)
    p = ad.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(t, ad.log(p))
    neg = ad.mul(ad.sub(Tensor(1.0), t), ad.log(ad.sub(Tensor(1.0), p)))
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


def dice_loss(pred: Tensor, target) -> Tensor:
    """Smooth Dice loss ``1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)``."""
    t = _target(target, pred)
    inter = ad.sum(ad.mul(pred, t))
    num = ad.add(ad.scale(inter, 2.0), Tensor(DICE_SMOOTH))
    den = ad.add(ad.add(ad.sum(pred), ad.sum(t)), Tensor(DICE_SMOOTH))
    return ad.sub(Tensor(1.0), ad.div(num, den))


def total_loss(pred: Tensor, target, kl: Tensor | float | None = None) -> tuple[Tensor, LossBreakdown]:
    """Unit-weight sum of BCE, Dice and KL.

    Returns the differentiable scalar and a float breakdown.  Raises
    ``TrainingAbort`` (with the breakdown attached) if anything is non-finite.
    """
    if kl is None:
        kl = Tensor(0.0)
    elif not isinstance(kl, Tensor):
        kl = Tensor(float(kl))
    if kl.item() < 0:
        raise ContractError(f"KL term must be non-negative, got {kl.item()}")
    bce = bce_loss(pred, target)
    dice = dice_loss(pred, target)
    total = ad.add(ad.add(bce, dice), ad.reshape(kl, ()))
    breakdown = LossBreakdown(bce.item(), dice.item(), kl.item(), total.item())
    if not breakdown.is_finite():
        raise TrainingAbort(f"non-finite loss: {breakdown}", breakdown)
    return total, breakdown


def iou_dice_metrics(pred_mask: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Overlap metrics of two binary masks; both are 1.0 when both masks are empty."""
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(target, dtype=bool)
    if p.shape != t.shape:
        raise DimensionError(f"masks differ in shape: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    union = int(np.count_nonzero(p | t))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / total


def threshold(probs, level: float = 0.5) -> np.ndarray:
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data > level
