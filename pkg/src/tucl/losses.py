"""Segmentation losses and the weighted training objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericError, ParameterError
from .tensor import Tensor

SMOOTH = 1e-5
BCE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.5
    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {value}")
        if self.lambda1 == self.lambda2 == self.lambda3 == 0:
            raise ParameterError("at least one of lambda1..lambda3 must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def _check_pair(y_hat: Tensor, y) -> Tensor:
    y = T.as_tensor(y)
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction {y_hat.shape} and target {y.shape} differ")
    return y


def soft_dice_loss(y_hat: Tensor, y, region=None, smooth: float = SMOOTH) -> Tensor:
    """Mean over channels of ``1 - (2 Σ ŷy + s) / (Σ ŷ + Σ y + s)``.

    Sums run over the spatial axes, restricted to ``region`` (a boolean
    spatial mask) when given.  An empty region contributes exactly zero.
    """
    y = _check_pair(y_hat, y)
    axes = tuple(range(1, y_hat.ndim))
    if region is not None:
        m = Tensor(np.asarray(region, dtype=np.float64)[None])
        y_hat = y_hat * m
        y = y * m
    inter = T.tsum(y_hat * y, axis=axes)
    denom = T.tsum(y_hat, axis=axes) + T.tsum(y, axis=axes)
    return T.mean(1.0 - (2.0 * inter + smooth) / (denom + smooth))


def bce_per_channel(y_hat: Tensor, y) -> Tensor:
    """Binary cross-entropy averaged over voxels, one value per channel."""
    y = _check_pair(y_hat, y)
    p = T.clamp(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll, axis=tuple(range(1, y_hat.ndim)))


def seg_loss(y_hat: Tensor, y) -> Tensor:
    """Mean over regions of ``(soft Dice loss + BCE) / 2``."""
    y = _check_pair(y_hat, y)
    axes = tuple(range(1, y_hat.ndim))
    inter = T.tsum(y_hat * y, axis=axes)
    denom = T.tsum(y_hat, axis=axes) + T.tsum(y, axis=axes)
    dice = 1.0 - (2.0 * inter + SMOOTH) / (denom + SMOOTH)
    return T.mean((dice + bce_per_channel(y_hat, y)) * 0.5)


def total_loss(parts: dict, w: LossWeights) -> Tensor:
    """``λ1·seg + λ2·tpa + λ3·dur``; raises on a non-finite part."""
    coeffs = {"seg": w.lambda1, "tpa": w.lambda2, "dur": w.lambda3}
    unknown = set(parts) - set(coeffs)
    if unknown:
        raise ContractError(f"unknown loss parts {sorted(unknown)}")
    total: Tensor | None = None
    for name, lam in coeffs.items():
        part = T.as_tensor(parts.get(name, 0.0))
        if part.size != 1:
            raise ContractError(f"loss part {name!r} is not scalar: {part.shape}")
        if not math.isfinite(part.item()):
            raise NumericError(f"loss part {name!r} is not finite ({part.item()})")
        term = part * lam
        total = term if total is None else total + term
    return total
