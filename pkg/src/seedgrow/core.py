"""Volume container, masked statistics and the on-disk volume format.

A volume is stored as two files sharing a stem: ``<stem>.json`` (header) and
``<stem>.raw`` (little-endian payload in C order, z slowest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a volume header or payload is inconsistent."""


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar grid with voxel spacing.

    Attributes:
        data: array of shape (nz, ny, nx), float32 (real) or uint8 (label).
        spacing_mm: (sz, sy, sx) millimeters per voxel.
    """

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D and nonempty, got shape {data.shape}")
        if data.dtype == np.uint8 or data.dtype == np.bool_:
            data = data.astype(np.uint8, copy=False)
        else:
            data = data.astype(np.float32, copy=False)
            if not np.isfinite(data).all():
                raise ValueError("real volume contains NaN or Inf")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_label(self) -> bool:
        return self.data.dtype == np.uint8

    @property
    def dtype_name(self) -> str:
        return "u8" if self.is_label else "f32"

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx

    def like(self, data: np.ndarray) -> "Volume":
        """New volume with the same spacing."""
        return Volume(data, self.spacing_mm)

    def same_geometry(self, other: "Volume") -> bool:
        return self.shape == other.shape and np.allclose(self.spacing_mm, other.spacing_mm)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.data.dtype == other.data.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass
class DceCase:
    """One patient timepoint: precontrast, postcontrast frames and masks."""

    pre: Volume
    post: list
    breast_mask: Volume
    case_id: str = "case"
    gt_tumor: Optional[Volume] = None
    gt_vessel: Optional[Volume] = None
    gt_benign: Optional[Volume] = None
    # analytic volume (mm^3) per tumor component label, when known
    gt_tumor_volumes: dict = field(default_factory=dict)
    # generator parameters, set by the phantom module
    anatomy: Optional[object] = None

    def __post_init__(self):
        if len(self.post) < 2:
            raise ValueError("a DCE case needs at least two postcontrast frames")
        members = [self.pre, *self.post, self.breast_mask]
        members += [m for m in (self.gt_tumor, self.gt_vessel, self.gt_benign) if m is not None]
        for v in members[1:]:
            if not v.same_geometry(self.pre):
                raise ValueError("all volumes of a case must share shape and spacing")
        for m in (self.breast_mask, self.gt_vessel, self.gt_benign):
            if m is not None and (not m.is_label or m.data.max() > 1):
                raise ValueError("masks must be binary label volumes")
        if self.gt_tumor is not None and not self.gt_tumor.is_label:
            raise ValueError("tumor ground truth must be a label volume")

    @property
    def shape(self) -> tuple:
        return self.pre.shape

    @property
    def spacing_mm(self) -> tuple:
        return self.pre.spacing_mm


def _paths(path) -> tuple:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".raw")


def write_volume(vol: Volume, path) -> None:
    """Write ``vol`` as ``<path>.json`` + ``<path>.raw``."""
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(vol.shape),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": vol.dtype_name,
        "order": "C-zyx",
        "endianness": "little",
        "data": raw_path.name,
    }
    raw_path.write_bytes(vol.data.astype(DTYPES[vol.dtype_name], copy=False).tobytes(order="C"))
    header_path.write_text(json.dumps(header, indent=2) + "\n")


def read_volume(path) -> Volume:
    """Read a volume written by :func:`write_volume`."""
    header_path, _ = _paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    header = json.loads(header_path.read_text())
    dtype_name = header.get("dtype")
    if dtype_name not in DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype_name!r}")
    if header.get("order", "C-zyx") != "C-zyx" or header.get("endianness", "little") != "little":
        raise VolumeFormatError("only little-endian C-zyx volumes are supported")
    raw_path = header_path.parent / header.get("data", _paths(path)[1].name)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    shape = tuple(int(s) for s in header["shape"])
    dtype = DTYPES[dtype_name]
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path.name}: expected {expected} bytes for shape {shape}, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if dtype_name == "f32" and not np.isfinite(data).all():
        raise VolumeFormatError(f"{raw_path.name}: non-finite values in real volume")
    return Volume(data.astype(np.float32) if dtype_name == "f32" else data.copy(),
                  tuple(header["spacing_mm"]))


def masked_percentile(vol: Volume, mask: Volume, p: float) -> float:
    """p-th percentile (0..100) of voxels under ``mask``, linear interpolation
    between order statistics at rank p/100*(n-1)."""
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    values = np.asarray(vol.data)[np.asarray(mask.data) > 0]
    if values.size == 0:
        raise ValueError("mask is empty")
    values = np.sort(values.astype(np.float64))
    rank = p / 100.0 * (values.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, values.size - 1)
    frac = rank - lo
    return float(values[lo] + (values[hi] - values[lo]) * frac)


def masked_mean(vol: Volume, mask: Volume) -> float:
    values = np.asarray(vol.data)[np.asarray(mask.data) > 0]
    if values.size == 0:
        raise ValueError("mask is empty")
    return float(values.astype(np.float64).mean())
