"""Constrained volume growing from a seed point.

The region is grown on the washin map: an initial flood at a threshold from
the seed neighbourhood, then repeated rounds of fitting an ellipsoidal volume
of interest to the region, re-deriving the threshold from the region's mean
enhancement and re-flooding from the seed inside that ellipsoid.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .core import Volume
from .detect import FULL_CONNECTIVITY, SeedPoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrowConfig:
    threshold_fraction: float = 0.5
    voi_scale: float = 2.5
    connectivity: int = 26
    max_iterations: int = 10
    convergence_tol: float = 0.01
    min_region: int = 5

    def __post_init__(self):
        if not 0 < self.threshold_fraction < 1:
            raise ValueError(f"threshold_fraction must be in (0, 1), got {self.threshold_fraction}")
        if self.voi_scale < 1:
            raise ValueError(f"voi_scale must be >= 1, got {self.voi_scale}")
        if self.connectivity != 26:
            raise ValueError("only 26-connectivity is supported")
        if self.max_iterations < 1 or self.min_region < 1:
            raise ValueError("max_iterations and min_region must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GrowConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grow config keys: {sorted(unknown)}")
        return cls(**d)


class RegionTooSmallError(ValueError):
    pass


@dataclass
class Ellipsoid:
    center: np.ndarray        # mm, (z, y, x)
    semi_axes: np.ndarray     # mm, descending
    orientation: np.ndarray   # rows are the principal directions

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.semi_axes = np.asarray(self.semi_axes, float)
        self.orientation = np.asarray(self.orientation, float)
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be positive")
        if not np.allclose(self.orientation @ self.orientation.T, np.eye(3), atol=1e-6):
            raise ValueError("orientation must be orthonormal")

    def contains(self, points_mm: np.ndarray) -> np.ndarray:
        q = (np.asarray(points_mm, float) - self.center) @ self.orientation.T
        return ((q / self.semi_axes) ** 2).sum(axis=-1) <= 1.0

    def half_extent(self) -> np.ndarray:
        """Half-width (mm) of the axis-aligned bounding box."""
        return np.sqrt(((self.semi_axes[:, None] * self.orientation) ** 2).sum(axis=0))

    def voxel_mask(self, shape, spacing) -> np.ndarray:
        spacing = np.asarray(spacing, float)
        out = np.zeros(shape, bool)
        c = self.center / spacing
        h = self.half_extent() / spacing
        lo = np.maximum(np.floor(c - h).astype(int), 0)
        hi = np.minimum(np.ceil(c + h).astype(int) + 1, shape)
        if np.any(hi <= lo):
            return out
        grids = np.meshgrid(*[np.arange(a, b) * s for a, b, s in zip(lo, hi, spacing)],
                            indexing="ij")
        pts = np.stack(grids, axis=-1)
        out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = self.contains(pts)
        return out

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "semi_axes": self.semi_axes.tolist(),
                "orientation": self.orientation.tolist()}


def _canonical_basis(vectors: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the span of ``vectors`` (columns),
    built from the z, y, x unit vectors projected onto that span."""
    proj = vectors @ vectors.T
    chosen = []
    for e in np.eye(3):
        v = proj @ e
        for u in chosen:
            v = v - (u @ v) * u
        n = np.linalg.norm(v)
        if n > 1e-6:
            chosen.append(v / n)
        if len(chosen) == vectors.shape[1]:
            break
    return np.array(chosen)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    for c in v:
        if abs(c) > 1e-12:
            return v if c > 0 else -v
    return v


def fit_ellipsoid(mask, spacing=None, scale: float = 2.5, min_region: int = 5) -> Ellipsoid:
    """Ellipsoid from the voxel-coordinate covariance (mm^2) of a mask.

    Semi-axes are ``scale * sqrt(eigenvalue)``, floored at one voxel diagonal.
    ``mask`` is a binary Volume, or an array with ``spacing`` given.
    """
    if isinstance(mask, Volume):
        spacing = mask.spacing_mm
        mask = mask.data
    spacing = np.asarray(spacing if spacing is not None else (1.0, 1.0, 1.0), float)
    pts = np.argwhere(np.asarray(mask) > 0) * spacing
    if len(pts) < min_region:
        raise RegionTooSmallError(f"region has {len(pts)} voxels, need at least {min_region}")
    center = pts.mean(axis=0)
    d = pts - center
    cov = d.T @ d / len(pts)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    tol = 1e-9 * max(w[0], 1e-300)
    rows = []
    i = 0
    while i < 3:
        j = i + 1
        while j < 3 and w[i] - w[j] <= tol:
            j += 1
        block = v[:, i:j] if j - i == 1 else _canonical_basis(v[:, i:j]).T
        rows.extend(_fix_sign(block[:, c]) for c in range(block.shape[1]))
        i = j
    floor = float(np.sqrt((spacing ** 2).sum()))
    semi = np.maximum(scale * np.sqrt(w), floor)
    return Ellipsoid(center, semi, np.array(rows))


def derive_threshold(washin, region, f: float) -> float:
    """f times the mean washin over the region."""
    data = washin.data if isinstance(washin, Volume) else np.asarray(washin)
    reg = region.data if isinstance(region, Volume) else np.asarray(region)
    sel = reg > 0
    if not sel.any():
        raise ValueError("region is empty")
    return float(f * data[sel].mean(dtype=np.float64))


def flood(washin: np.ndarray, allowed: np.ndarray, seed: tuple, threshold: float) -> np.ndarray:
    """26-connected component containing the seed among allowed voxels with
    washin >= threshold.  The seed itself is always part of the region."""
    cand = allowed & (washin >= threshold)
    cand[seed] = True
    idx = np.argwhere(cand)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    labels, _ = ndimage.label(cand[sl], structure=FULL_CONNECTIVITY)
    local = tuple(int(s - a) for s, a in zip(seed, lo))
    out = np.zeros(cand.shape, bool)
    out[sl] = labels == labels[local]
    return out


@dataclass
class Segmentation:
    mask: Volume
    volume_mm3: float
    seed: SeedPoint
    iterations_used: int
    final_threshold: float
    ellipsoid: Ellipsoid | None = None
    failed: bool = False
    reason: str = ""
    history: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"seed": self.seed.to_dict(), "volume_mm3": self.volume_mm3,
                "voxels": int(np.count_nonzero(self.mask.data)),
                "iterations_used": self.iterations_used,
                "final_threshold": self.final_threshold, "failed": self.failed,
                "reason": self.reason,
                "ellipsoid": self.ellipsoid.to_dict() if self.ellipsoid else None}


def _failed(washin: Volume, seed: SeedPoint, reason: str, iterations=0, threshold=0.0) -> Segmentation:
    log.info("growth from %s failed: %s", seed.coord.as_tuple(), reason)
    empty = washin.like(np.zeros(washin.shape, np.uint8))
    return Segmentation(empty, 0.0, seed, iterations, threshold, failed=True, reason=reason)


def grow(washin: Volume, breast_mask: Volume, seed: SeedPoint, cfg: GrowConfig = GrowConfig()) -> Segmentation:
    """Grow a lesion region from ``seed`` on the washin map."""
    if not washin.same_geometry(breast_mask):
        raise ValueError("washin and breast mask geometry differ")
    data = np.asarray(washin.data, np.float64)
    breast = np.asarray(breast_mask.data) > 0
    s = seed.coord.as_tuple()
    if not all(0 <= c < n for c, n in zip(s, data.shape)) or not breast[s]:
        raise ValueError(f"seed {s} is outside the breast mask")
    if data[s] <= 0:
        return _failed(washin, seed, "seed in non-enhancing tissue")

    nb = tuple(slice(max(c - 1, 0), c + 2) for c in s)
    nb_vals = data[nb][breast[nb]]
    t = cfg.threshold_fraction * float(nb_vals.mean())
    if t <= 0:
        return _failed(washin, seed, "non-enhancing seed neighbourhood")
    region = flood(data, breast, s, t)
    ell = None
    it = 0
    history = [int(region.sum())]
    for it in range(1, cfg.max_iterations + 1):
        n = int(region.sum())
        if n < cfg.min_region:
            return _failed(washin, seed, f"region collapsed to {n} voxels", it - 1, t)
        ell = fit_ellipsoid(region, washin.spacing_mm, cfg.voi_scale, cfg.min_region)
        voi = ell.voxel_mask(data.shape, washin.spacing_mm)
        t = derive_threshold(data, region, cfg.threshold_fraction)
        new = flood(data, breast & voi, s, t)
        m = int(new.sum())
        history.append(m)
        converged = np.array_equal(new, region) or abs(m - n) / n < cfg.convergence_tol
        region = new
        if converged:
            break
    n = int(region.sum())
    if n < cfg.min_region:
        return _failed(washin, seed, f"region collapsed to {n} voxels", it, t)
    vol = n * washin.voxel_volume_mm3
    return Segmentation(washin.like(region.astype(np.uint8)), float(vol), seed, it, t, ell,
                        history=history)
