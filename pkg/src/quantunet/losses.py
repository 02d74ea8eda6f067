"""Segmentation losses, metrics, and the composite bitwidth-regularized loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .quant import QuantParams, avg_bitwidth
from .tensor import Tensor

BCE_EPS = 1e-7
SMOOTH = 1e-5
DEFAULT_LAMBDA = 0.25


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_shapes(name: str, pred, target) -> None:
    if pred.shape != target.shape:
        raise ContractError(f"{name}: prediction shape {pred.shape} != target shape {target.shape}")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over every pixel of the batch."""
    t = _data(target)
    _check_shapes("bce_loss", pred, t)
    p = pred.data
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    n = p.size
    t = t.astype(p.dtype, copy=False)
    loss = -np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)

    def bw(g):
        dp = (-(t / pc) + (1 - t) / (1 - pc)) / n
        return (g * dp * inside,)

    return Tensor.from_op(np.asarray(loss, dtype=p.dtype), (pred,), bw, "bce")


def dice_loss(pred: Tensor, target, smooth: float = SMOOTH) -> Tensor:
    """1 - soft Dice, computed on probabilities so it stays differentiable."""
    t = _data(target)
    _check_shapes("dice_loss", pred, t)
    p = pred.data
    t = t.astype(p.dtype, copy=False)
    inter = float(np.sum(p * t, dtype=np.float64))
    denom = float(np.sum(p, dtype=np.float64)) + float(np.sum(t, dtype=np.float64)) + smooth
    num = 2.0 * inter + smooth
    loss = 1.0 - num / denom

    def bw(g):
        # d/dp [-(2 I + s)/D] = -(2 t D - (2 I + s)) / D^2
        dp = -(2.0 * t * denom - num) / (denom * denom)
        return ((g * dp).astype(p.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=p.dtype), (pred,), bw, "dice")


def threshold(pred, level: float = 0.5) -> np.ndarray:
    return (_data(pred) > level).astype(np.float64)


def dice_coeff(pred_mask, target, smooth: float = SMOOTH) -> float:
    p = _data(pred_mask).astype(np.float64)
    t = _data(target).astype(np.float64)
    _check_shapes("dice_coeff", p, t)
    return float((2.0 * np.sum(p * t) + smooth) / (np.sum(p) + np.sum(t) + smooth))


def dice_counts(pred_mask, target) -> tuple[float, float, float]:
    """(|P∩T|, |P|, |T|) so Dice can be pooled over many batches."""
    p = _data(pred_mask).astype(np.float64)
    t = _data(target).astype(np.float64)
    return float(np.sum(p * t)), float(np.sum(p)), float(np.sum(t))


def pixel_accuracy(pred_mask, target) -> float:
    p = _data(pred_mask)
    t = _data(target)
    _check_shapes("pixel_accuracy", p, t)
    return float(np.mean(p == t))


@dataclass
class LossBreakdown:
    bce: float
    dice: float
    bitwidth: float
    lam: float
    total: float
    n: int
    smooth: float = SMOOTH

    @property
    def bitwidth_term(self) -> float:
        return self.lam * self.bitwidth

    @classmethod
    def compose(cls, bce: float, dice: float, bitwidth: float, lam: float, n: int, smooth: float = SMOOTH):
        return cls(bce, dice, bitwidth, lam, bce + dice + lam * bitwidth, n, smooth)


def total_loss(
    pred: Tensor,
    target,
    bitwidth_params: Sequence[QuantParams],
    lam: float = DEFAULT_LAMBDA,
    smooth: float = SMOOTH,
) -> tuple[Tensor, LossBreakdown]:
    """L_BCE + L_Dice + lambda * average bitwidth, plus its breakdown."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    bce = bce_loss(pred, target)
    dice = dice_loss(pred, target, smooth)
    seg = bce.astype(np.float64) + dice.astype(np.float64)
    if bitwidth_params:
        bits = avg_bitwidth(bitwidth_params)
        loss = seg + bits * lam
        bits_v = float(bits.data)
    else:
        loss = seg
        bits_v = 0.0
    bd = LossBreakdown.compose(float(bce.data), float(dice.data), bits_v, lam, int(pred.data.size), smooth)
    return loss, bd
