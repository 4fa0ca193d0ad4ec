"""Multi-contrast volumes, region masks, and their JSON + raw container.

A container is a pair of files sharing a stem: ``<stem>.json`` (header) and
``<stem>.raw`` (little-endian float64, row-major).  The header carries a CRC-32
of the payload so truncation and bit rot are detected on read.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, ParameterError, ValidationError

MODALITIES = ("T1", "T2", "T1ce", "FLAIR")
REGIONS = ("WT", "TC", "ET")
DTYPE_TAG = "f64le"
MIN_DIM = 8


def _as_array(values) -> np.ndarray:
    data = getattr(values, "data", values)
    return np.asarray(data, dtype=np.float64)


@dataclass
class MultiContrastVolume:
    intensities: np.ndarray
    modalities: tuple[str, ...] = MODALITIES
    present: tuple[bool, ...] | None = None

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        self.modalities = tuple(self.modalities)
        if self.present is None:
            self.present = (True,) * len(self.modalities)
        self.present = tuple(bool(p) for p in self.present)
        self.validate()

    def validate(self) -> None:
        x = self.intensities
        if x.ndim != 4 or x.shape[0] != len(self.modalities):
            raise ValidationError(
                f"intensities shape {x.shape} does not match channels {self.modalities}")
        if len(self.present) != len(self.modalities):
            raise ValidationError("presence flags and channel names differ in length")
        if min(x.shape[1:]) < MIN_DIM:
            raise ValidationError(f"spatial dims {x.shape[1:]} below minimum {MIN_DIM}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("intensities contain non-finite values")
        for name, flag, chan in zip(self.modalities, self.present, x):
            if not flag and np.any(chan != 0):
                raise ValidationError(f"absent modality {name} has nonzero voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape[1:])


@dataclass
class RegionMask:
    """Per-region map ``[WT, TC, ET]``; ``values`` may be an ndarray or a grad-tracking Tensor."""

    values: object
    binarized: bool = False
    regions: tuple[str, ...] = field(default=REGIONS)

    def __post_init__(self):
        if not hasattr(self.values, "requires_grad"):
            self.values = np.asarray(self.values, dtype=np.float64)
        self.regions = tuple(self.regions)
        self.validate()

    @property
    def array(self) -> np.ndarray:
        return _as_array(self.values)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.array.shape[1:])

    def validate(self) -> None:
        v = self.array
        if v.ndim != 4 or v.shape[0] != len(self.regions):
            raise ValidationError(f"mask shape {v.shape} does not match regions {self.regions}")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
            raise ValidationError("mask values must lie in [0, 1]")
        if self.binarized:
            if not np.all((v == 0) | (v == 1)):
                raise ValidationError("binarized mask has values other than 0/1")
            for outer, inner in zip(range(len(self.regions) - 1), range(1, len(self.regions))):
                if np.any(v[inner] > v[outer]):
                    raise ValidationError(
                        f"hierarchy violated: {self.regions[inner]} outside {self.regions[outer]}")


def drop_modality(v: MultiContrastVolume, name: str) -> MultiContrastVolume:
    """Return a copy with channel ``name`` zero-filled and flagged absent."""
    if name not in v.modalities:
        raise ParameterError(f"unknown modality {name!r}; expected one of {v.modalities}")
    i = v.modalities.index(name)
    x = v.intensities.copy()
    x[i] = 0.0
    present = list(v.present)
    present[i] = False
    return MultiContrastVolume(x, v.modalities, tuple(present))


# --------------------------------------------------------------------- container


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


def _atomic_write(target: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, header: dict, array: np.ndarray) -> None:
    """Write ``array`` as raw f64le plus a JSON header (checksum/dtype added)."""
    stem = _stem(path)
    payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    head = dict(header)
    head["dtype"] = DTYPE_TAG
    head["checksum"] = zlib.crc32(payload)
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(stem.with_name(stem.name + ".raw"), payload)
        _atomic_write(stem.with_name(stem.name + ".json"),
                      (json.dumps(head, indent=2, sort_keys=True) + "\n").encode())
    except OSError as exc:
        raise OSError(f"cannot write container {stem}: {exc}") from exc


def read_container(path) -> tuple[dict, np.ndarray]:
    """Read and verify a container; returns the header and the flat payload."""
    stem = _stem(path)
    head_path = stem.with_name(stem.name + ".json")
    raw_path = stem.with_name(stem.name + ".raw")
    for p in (head_path, raw_path):
        if not p.exists():
            raise FileNotFoundError(f"missing container file {p}")
    try:
        header = json.loads(head_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{head_path}: malformed header ({exc})") from exc
    payload = raw_path.read_bytes()
    if header.get("dtype") != DTYPE_TAG:
        raise CorruptFileError(f"{head_path}: unsupported dtype {header.get('dtype')!r}")
    if len(payload) % 8:
        raise CorruptFileError(f"{raw_path}: payload length {len(payload)} not a multiple of 8")
    if zlib.crc32(payload) != header.get("checksum"):
        raise CorruptFileError(f"{raw_path}: checksum mismatch")
    return header, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def write_volume(v: MultiContrastVolume | RegionMask, path) -> None:
    if isinstance(v, MultiContrastVolume):
        header = {"kind": "volume", "dims": list(v.dims), "channels": list(v.modalities),
                  "present": list(v.present), "binarized": False}
        data = v.intensities
    elif isinstance(v, RegionMask):
        header = {"kind": "mask", "dims": list(v.dims), "channels": list(v.regions),
                  "present": [True] * len(v.regions), "binarized": bool(v.binarized)}
        data = v.array
    else:
        raise TypeError(f"cannot serialize {type(v).__name__}")
    write_container(path, header, data)


def read_volume(path) -> MultiContrastVolume | RegionMask:
    header, flat = read_container(path)
    try:
        dims = [int(d) for d in header["dims"]]
        channels = tuple(header["channels"])
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: incomplete header ({exc})") from exc
    expected = len(channels) * int(np.prod(dims))
    if flat.size != expected:
        raise CorruptFileError(
            f"{path}: header expects {expected} values ({len(channels)}x{dims}), payload has {flat.size}")
    data = flat.reshape((len(channels), *dims))
    if kind == "volume":
        return MultiContrastVolume(data, channels, tuple(header.get("present", [True] * len(channels))))
    if kind == "mask":
        return RegionMask(data, bool(header.get("binarized", False)), channels)
    raise CorruptFileError(f"{path}: unknown kind {kind!r}")
