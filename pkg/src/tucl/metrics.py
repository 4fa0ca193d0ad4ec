"""Evaluation metrics: Dice, HD95, volumes, Bland-Altman agreement, Pearson r."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ParameterError, UndefinedCorrelationError

# region order used by every report table
TABLE_REGIONS = ("ET", "WT", "TC")
HD95_CONVENTION = ("hd95: linear-interpolated 95th percentile of directed surface distances, "
                   "symmetric=max, both-empty=0, one-empty=volume diagonal")

_SIX = ndimage.generate_binary_structure(3, 1)


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ContractError(f"{name} mask is not binary")
        m = m.astype(bool)
    return m


def dice(pred, truth) -> float:
    """Dice overlap in percent; two empty masks score 100."""
    a, b = _binary(pred, "pred"), _binary(truth, "truth")
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(a, b).sum()) / total


def surface(mask) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or on the volume border."""
    m = _binary(mask, "mask")
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def _spacing(spacing, ndim: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (ndim,)).copy()
    if np.any(s <= 0):
        raise ParameterError(f"voxel spacing must be positive, got {spacing}")
    return s


def directed_surface_distances(src, dst, spacing=1.0) -> np.ndarray:
    """Distance from each surface voxel of ``src`` to the nearest surface voxel of ``dst``."""
    s_src, s_dst = surface(src), surface(dst)
    sp = _spacing(spacing, s_src.ndim)
    edt = ndimage.distance_transform_edt(~s_dst, sampling=sp)
    return edt[s_src]


def hd95(pred, truth, spacing=1.0) -> float:
    a, b = _binary(pred, "pred"), _binary(truth, "truth")
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    sp = _spacing(spacing, a.ndim)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if has_a != has_b:
        return float(np.sqrt(np.sum((np.asarray(a.shape) * sp) ** 2)))
    ab = np.percentile(directed_surface_distances(a, b, sp), 95)
    ba = np.percentile(directed_surface_distances(b, a, sp), 95)
    return float(max(ab, ba))


def volume(mask, spacing=1.0) -> float:
    m = _binary(mask, "mask")
    return float(m.sum()) * float(np.prod(_spacing(spacing, m.ndim)))


def bland_altman(pred_volumes, true_volumes) -> tuple[float, float, float]:
    """Mean bias and 95% limits of agreement of ``pred - true``."""
    p = np.asarray(pred_volumes, dtype=np.float64)
    t = np.asarray(true_volumes, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ParameterError(f"volume lists must be equal-length vectors: {p.shape} vs {t.shape}")
    if p.size < 2:
        raise ParameterError("Bland-Altman needs at least two pairs")
    d = p - t
    bias = float(d.mean())
    half = 1.96 * float(d.std(ddof=1))
    return bias, bias - half, bias + half


def pearson_r(a, b) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ParameterError(f"samples must be equal-length vectors: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ParameterError("correlation needs at least two pairs")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined: a sample has zero variance")
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


# ---------------------------------------------------------------------- report


@dataclass
class CaseRegion:
    case: str
    region: str
    dice: float
    hd95: float
    pred_volume: float
    true_volume: float


@dataclass
class EvalReport:
    rows: list[CaseRegion]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: str = ""
    meta: dict = field(default_factory=dict)

    def cases(self) -> list[str]:
        return list(dict.fromkeys(r.case for r in self.rows))

    def _col(self, region: str, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.rows if r.region == region])

    def mean_dice(self, region: str) -> float:
        if region == "Ave":
            return float(np.mean([self.mean_dice(r) for r in TABLE_REGIONS]))
        return float(self._col(region, "dice").mean())

    def mean_hd95(self, region: str) -> float:
        if region == "Ave":
            return float(np.mean([self.mean_hd95(r) for r in TABLE_REGIONS]))
        return float(self._col(region, "hd95").mean())

    def agreement(self, region: str) -> tuple[float, float, float] | None:
        p, t = self._col(region, "pred_volume"), self._col(region, "true_volume")
        return bland_altman(p, t) if p.size >= 2 else None

    def correlation(self, region: str) -> float | None:
        try:
            return pearson_r(self._col(region, "true_volume"), self._col(region, "pred_volume"))
        except (UndefinedCorrelationError, ParameterError):
            return None

    def table_row(self) -> dict:
        """Dice/HD95 per ET, WT, TC and their average."""
        out = {}
        for r in TABLE_REGIONS + ("Ave",):
            out[f"Dice_{r}"] = self.mean_dice(r)
        for r in TABLE_REGIONS + ("Ave",):
            out[f"HD95_{r}"] = self.mean_hd95(r)
        return out

    def summary(self) -> dict:
        out = self.table_row()
        for r in TABLE_REGIONS:
            ba = self.agreement(r)
            out[f"BA_bias_{r}"], out[f"BA_lower_{r}"], out[f"BA_upper_{r}"] = ba if ba else (None,) * 3
            out[f"r_{r}"] = self.correlation(r)
        return out
