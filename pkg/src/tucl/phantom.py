"""Seeded synthetic multi-contrast tumor phantoms with exact ground truth.

Each phantom is three nested anisotropic ellipsoids (WT ⊇ TC ⊇ ET) sharing a
center.  Every modality channel is a constant background plus per-region
offsets, added cumulatively from the outer region inward, plus Gaussian noise.
T1ce carries nearly all of the TC/ET contrast, while the WT contrast is shared
by FLAIR and T2, so removing a modality hurts the regions it encodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParameterError
from .rng import Stream
from .volume_io import MODALITIES, MultiContrastVolume, RegionMask, read_volume, write_volume

# rows T1, T2, T1ce, FLAIR; columns WT, TC, ET (cumulative offsets)
DEFAULT_PROFILE = (
    (-0.20, -0.10, 0.00),
    (0.80, 0.10, 0.00),
    (0.00, 0.80, 0.70),
    (0.90, 0.05, 0.00),
)
DEFAULT_BACKGROUND = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (24, 24, 24)
    center: tuple[float, float, float] = (11.5, 11.5, 11.5)
    radii: tuple[float, float, float] = (7.0, 5.0, 3.0)
    anisotropy: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.1
    contrast_profile: tuple[tuple[float, float, float], ...] = DEFAULT_PROFILE
    background: tuple[float, float, float, float] = DEFAULT_BACKGROUND
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "center", "radii", "anisotropy", "background"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "contrast_profile",
                           tuple(tuple(float(v) for v in row) for row in self.contrast_profile))
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"dims must be three positive sizes, got {self.dims}")
        r_wt, r_tc, r_et = self.radii
        if not 0 <= r_et <= r_tc <= r_wt <= min(self.dims) / 2:
            raise ParameterError(
                f"radii must satisfy 0 <= r_ET <= r_TC <= r_WT <= min(dims)/2, got {self.radii}")
        if not self.noise_sigma >= 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if any(a <= 0 for a in self.anisotropy) or len(self.anisotropy) != 3:
            raise ParameterError(f"anisotropy factors must be three positive values: {self.anisotropy}")
        if len(self.contrast_profile) != 4 or any(len(r) != 3 for r in self.contrast_profile):
            raise ParameterError("contrast_profile must be a 4x3 matrix")
        if len(self.background) != 4:
            raise ParameterError("background must have one value per modality")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contrast_profile"] = [list(r) for r in self.contrast_profile]
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


def ellipsoid(dims, center, radius: float, anisotropy) -> np.ndarray:
    """Boolean membership of voxel centers in an axis-aligned ellipsoid."""
    if radius <= 0:
        return np.zeros(dims, dtype=bool)
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    q = sum(((g - c) / (radius * a)) ** 2 for g, c, a in zip(grids, center, anisotropy))
    return q <= 1.0


def generate(spec: PhantomSpec) -> tuple[MultiContrastVolume, RegionMask]:
    spec.validate()
    masks = np.stack([ellipsoid(spec.dims, spec.center, r, spec.anisotropy)
                      for r in spec.radii]).astype(np.float64)
    profile = np.asarray(spec.contrast_profile)
    x = np.empty((len(MODALITIES), *spec.dims))
    for m in range(len(MODALITIES)):
        x[m] = spec.background[m] + np.tensordot(profile[m], masks, axes=1)
    if spec.noise_sigma > 0:
        noise = Stream(spec.seed, "phantom-noise").generator.normal(0.0, spec.noise_sigma, x.shape)
        x = x + noise
    return MultiContrastVolume(x), RegionMask(masks, binarized=True)


@dataclass(frozen=True)
class Jitter:
    """Per-item perturbation ranges used by :func:`make_dataset`."""
    center: float = 2.0            # uniform ± voxels per axis
    radius_scale: float = 0.15     # uniform ± fraction, independent per radius
    anisotropy: float = 0.15       # uniform ± fraction per axis
    noise_scale: float = 0.2       # uniform ± fraction of noise_sigma


def item_spec(base: PhantomSpec, seed: int, index: int, jitter: Jitter = Jitter()) -> PhantomSpec:
    g = Stream(seed, ("dataset", "item", str(index))).generator
    center = tuple(c + g.uniform(-jitter.center, jitter.center) for c in base.center)
    scales = 1.0 + g.uniform(-jitter.radius_scale, jitter.radius_scale, 3)
    aniso = tuple(a * (1.0 + g.uniform(-jitter.anisotropy, jitter.anisotropy)) for a in base.anisotropy)
    noise = base.noise_sigma * (1.0 + g.uniform(-jitter.noise_scale, jitter.noise_scale))
    # keep nesting and the half-extent bound after jitter
    cap = min(base.dims) / 2
    r_wt = min(base.radii[0] * scales[0], cap)
    r_tc = min(base.radii[1] * scales[1], r_wt)
    r_et = min(base.radii[2] * scales[2], r_tc)
    # keep the largest ellipsoid semi-axis inside the volume
    for ax, n in enumerate(base.dims):
        half = r_wt * aniso[ax]
        lo, hi = half, n - 1 - half
        if lo <= hi:
            center = center[:ax] + (float(np.clip(center[ax], lo, hi)),) + center[ax + 1:]
    return replace(base, center=center, radii=(r_wt, r_tc, r_et), anisotropy=aniso,
                   noise_sigma=noise, seed=int(g.integers(0, 2**31 - 1)))


def labeled_indices(n: int, labeled_fraction: float, seed: int) -> list[int]:
    """Deterministic choice of ``ceil(fraction * n)`` labeled item indices."""
    if not 0 < labeled_fraction <= 1:
        raise ParameterError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    k = math.ceil(round(labeled_fraction * n, 9))
    perm = Stream(seed, ("dataset", "labeled-split")).generator.permutation(n)
    return sorted(int(i) for i in perm[:k])


def make_dataset(n: int, base: PhantomSpec, labeled_fraction: float, seed: int,
                 jitter: Jitter = Jitter()):
    """Generate ``n`` jittered phantoms; masks are kept only for the labeled split.

    Returns a list of ``(volume, mask_or_None)`` in item order.
    """
    if n < 1:
        raise ParameterError(f"dataset size must be >= 1, got {n}")
    labeled = set(labeled_indices(n, labeled_fraction, seed))
    items = []
    for i in range(n):
        vol, mask = generate(item_spec(base, seed, i, jitter))
        items.append((vol, mask if i in labeled else None))
    return items


# ---------------------------------------------------------------------- on disk


def save_dataset(out_dir, n: int, base: PhantomSpec, labeled_fraction: float, seed: int,
                 jitter: Jitter = Jitter()) -> dict:
    """Write volumes, labeled masks, and a ``dataset.json`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labeled = set(labeled_indices(n, labeled_fraction, seed))
    entries = []
    for i in range(n):
        spec = item_spec(base, seed, i, jitter)
        vol, mask = generate(spec)
        case = f"case_{i:03d}"
        write_volume(vol, out / f"{case}_vol")
        entry = {"id": case, "volume": f"{case}_vol", "mask": None,
                 "labeled": i in labeled, "spec": spec.to_dict()}
        if i in labeled:
            write_volume(mask, out / f"{case}_mask")
            entry["mask"] = f"{case}_mask"
        entries.append(entry)
    manifest = {"seed": seed, "n": n, "labeled_fraction": labeled_fraction,
                "base_spec": base.to_dict(), "jitter": asdict(jitter), "items": entries}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir) -> list[tuple[str, MultiContrastVolume, RegionMask | None]]:
    """Read a manifest directory into ``(case_id, volume, mask_or_None)`` triples."""
    root = Path(data_dir)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    out = []
    for entry in manifest["items"]:
        vol = read_volume(root / entry["volume"])
        mask = read_volume(root / entry["mask"]) if entry.get("mask") else None
        out.append((entry["id"], vol, mask))
    return out
