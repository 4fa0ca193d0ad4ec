"""Dual-path uncertainty refinement.

Monte-Carlo dropout gives ``T`` stochastic predictions; their per-voxel
population variance, averaged over the region channels, is the uncertainty
field ``U``.  Voxels with ``U <= delta`` form the core, the rest the boundary,
and the refinement loss weights an overlap loss on each part separately.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .losses import soft_dice_loss
from .rng import Stream
from .tensor import Tensor, no_grad
from .volume_io import MultiContrastVolume, RegionMask


@dataclass(frozen=True)
class DeltaMode:
    """How the core/boundary threshold is resolved: a per-volume quantile of U or a fixed value."""
    kind: str = "quantile"
    value: float = 0.9

    def __post_init__(self):
        if self.kind not in ("quantile", "fixed"):
            raise ParameterError(f"delta mode must be 'quantile' or 'fixed', got {self.kind!r}")
        if self.kind == "quantile" and not 0 <= self.value <= 1:
            raise ParameterError(f"delta quantile must be in [0, 1], got {self.value}")
        if self.kind == "fixed" and not self.value >= 0:
            raise ParameterError(f"fixed delta must be >= 0, got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "DeltaMode":
        kind, _, value = text.partition(":")
        try:
            return cls(kind.strip(), float(value) if value else 0.9)
        except ValueError:
            raise ParameterError(f"cannot parse delta mode {text!r}") from None

    def __str__(self) -> str:
        return f"{self.kind}:{self.value:g}"


@dataclass
class UncertaintyField:
    U: np.ndarray
    T: int
    delta: float
    core_mask: np.ndarray
    boundary_mask: np.ndarray

    def __post_init__(self):
        if np.any(self.U < 0):
            raise ContractError("uncertainty field has negative entries")
        if np.any(self.core_mask & self.boundary_mask):
            raise ContractError("core and boundary overlap")
        if not np.all(self.core_mask | self.boundary_mask):
            raise ContractError("core and boundary do not cover the domain")

    @property
    def n_core(self) -> int:
        return int(self.core_mask.sum())

    @property
    def n_boundary(self) -> int:
        return int(self.boundary_mask.sum())

    @classmethod
    def from_variance(cls, U: np.ndarray, T: int, mode: DeltaMode = DeltaMode()) -> "UncertaintyField":
        core, boundary, delta = partition(U, mode)
        return cls(U, T, delta, core, boundary)


def resolve_delta(U: np.ndarray, mode: DeltaMode) -> float:
    if mode.kind == "fixed":
        return float(mode.value)
    # lower order statistic: delta is an attained value of U, so the core is never empty
    flat = np.sort(U, axis=None)
    return float(flat[int(np.floor(mode.value * (flat.size - 1)))])


def partition(U, mode: DeltaMode = DeltaMode()) -> tuple[np.ndarray, np.ndarray, float]:
    """Split the domain into ``core = {U <= delta}`` and ``boundary = {U > delta}``."""
    U = np.asarray(U, dtype=np.float64)
    if np.any(U < 0):
        raise ContractError("uncertainty must be nonnegative")
    delta = resolve_delta(U, mode)
    core = U <= delta
    return core, ~core, delta


def variance_field(samples: np.ndarray) -> np.ndarray:
    """Population variance over axis 0, then mean over the region channel axis.

    ``samples`` has shape ``T × C × W × H × D``; the result is ``W × H × D``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    centre = samples.sum(axis=0) / n
    var = ((samples - centre) ** 2).sum(axis=0) / n
    return var.mean(axis=0)


def mc_uncertainty(model, x: MultiContrastVolume, T: int = 8, seed: int | Stream = 0,
                   mode: DeltaMode = DeltaMode(), workers: int = 1):
    """Run ``T`` dropout-active forward passes; return the mean prediction and the field.

    Pass ``t`` draws its dropout masks from ``Stream(seed, ("mc", t))``, so the
    result does not depend on execution order or ``workers``.
    """
    if T < 2:
        raise ParameterError(f"Monte-Carlo sample count must be >= 2, got {T}")
    root = seed.split("mc") if isinstance(seed, Stream) else Stream(seed, "mc")

    def one(t: int) -> np.ndarray:
        with no_grad():
            return model.forward(x, stochastic=True, seed=root.split(t)).array

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, range(T)))
    else:
        samples = [one(t) for t in range(T)]
    stack = np.stack(samples)
    mean = RegionMask(stack.sum(axis=0) / T)
    U = variance_field(stack)
    return mean, UncertaintyField.from_variance(U, T, mode)


def dur_loss(y_hat: RegionMask, y: RegionMask, field: UncertaintyField,
             alpha: float = 1.0, beta: float = 2.0) -> Tensor:
    """``alpha * ℓ(core) + beta * ℓ(boundary)`` with ℓ the region-restricted soft Dice loss.

    An empty part contributes exactly zero.  The field is treated as a constant.
    """
    if alpha < 0 or beta < 0:
        raise ParameterError(f"alpha and beta must be >= 0, got {alpha}, {beta}")
    if not y.binarized:
        raise ContractError("DUR target must be a binarized mask")
    if y_hat.binarized:
        raise ContractError("DUR prediction must be probabilistic")
    pred = y_hat.values if isinstance(y_hat.values, Tensor) else Tensor(y_hat.values)
    if field.core_mask.shape != pred.shape[1:]:
        raise DimensionError(f"field {field.core_mask.shape} does not match prediction {pred.shape}")
    core = soft_dice_loss(pred, y.array, region=field.core_mask)
    boundary = soft_dice_loss(pred, y.array, region=field.boundary_mask)
    return core * alpha + boundary * beta
