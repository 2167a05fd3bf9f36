"""Ensemble consensus and seed-point extraction.

Seeds are regional maxima of the inward Euclidean distance transform of the
consensus mask, one or more per 26-connected component.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .core import Volume

FULL_CONNECTIVITY = np.ones((3, 3, 3), bool)


@dataclass(frozen=True)
class VoxelCoord:
    z: int
    y: int
    x: int

    def as_tuple(self) -> tuple:
        return (self.z, self.y, self.x)


@dataclass
class SeedPoint:
    coord: VoxelCoord
    edt_depth_mm: float
    component_id: int
    mean_posterior: float

    def to_dict(self) -> dict:
        return {"coord": list(self.coord.as_tuple()), "edt_depth_mm": self.edt_depth_mm,
                "component_id": self.component_id, "mean_posterior": self.mean_posterior}

    @classmethod
    def from_dict(cls, d: dict) -> "SeedPoint":
        return cls(VoxelCoord(*map(int, d["coord"])), float(d.get("edt_depth_mm", 0.0)),
                   int(d.get("component_id", 0)), float(d.get("mean_posterior", 0.0)))


@dataclass
class EnsembleModel:
    members: list            # NetworkParams, all with the same architecture
    tau: float = 0.9
    rule: str = "majority"   # or "unanimity"

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        archs = {m.arch for m in self.members}
        if len(archs) != 1:
            raise ValueError("ensemble members must share one architecture")
        required_votes(len(self.members), self.rule)


def required_votes(n_members: int, rule: str) -> int:
    if rule == "majority":
        return n_members // 2 + 1
    if rule == "unanimity":
        return n_members
    raise ValueError(f"unknown vote rule {rule!r}")


def consensus(posteriors, tau: float, rule: str = "majority") -> Volume:
    """Voxels where enough members have posterior >= tau."""
    posteriors = list(posteriors)
    first = posteriors[0]
    for p in posteriors[1:]:
        if p.shape != first.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {first.shape}")
    votes = np.zeros(first.shape, np.int32)
    for p in posteriors:
        votes += np.asarray(p.data) >= tau
    return first.like((votes >= required_votes(len(posteriors), rule)).astype(np.uint8))


@numba.njit(cache=True)
def _envelope_1d(f, spacing, out, v, zbuf):
    """Exact 1D squared distance transform  out[q] = min_p (s(q-p))^2 + f[p]
    by the lower envelope of parabolas; infinite entries are skipped."""
    n = f.shape[0]
    s2 = spacing * spacing
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            zbuf[0] = -np.inf
            zbuf[1] = np.inf
            continue
        while True:
            p = v[k]
            s = ((fq + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
            if s <= zbuf[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        if k < 0:
            k = 0
            v[0] = q
            zbuf[0] = -np.inf
            zbuf[1] = np.inf
        else:
            k += 1
            v[k] = q
            zbuf[k] = s
            zbuf[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    k = 0
    for q in range(n):
        while zbuf[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = s2 * d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_axis(vol, axis_len_last, spacing):
    """Apply the 1D transform along the last axis of a (lines, n) view."""
    lines = vol.shape[0]
    n = axis_len_last
    out = np.empty(n)
    v = np.empty(n, np.int64)
    zbuf = np.empty(n + 1)
    line = np.empty(n)
    for i in range(lines):
        for q in range(n):
            line[q] = vol[i, q]
        _envelope_1d(line, spacing, out, v, zbuf)
        for q in range(n):
            vol[i, q] = out[q]


def squared_edt(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared Euclidean distance (mm^2) from each set voxel to the nearest
    unset voxel, 0 on unset voxels.  Space outside the grid counts as unset."""
    m = np.pad(np.asarray(mask).astype(bool), 1)
    f = np.where(m, np.inf, 0.0)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        flat = moved.reshape(-1, shape[-1])
        _edt_axis(flat, shape[-1], float(spacing[axis]))
        f = np.moveaxis(flat.reshape(shape), -1, axis)
    return np.ascontiguousarray(f[1:-1, 1:-1, 1:-1])


def edt(mask: Volume) -> Volume:
    """Inward Euclidean distance transform in millimeters."""
    d2 = squared_edt(mask.data > 0, mask.spacing_mm)
    return mask.like(np.sqrt(d2).astype(np.float32))


def connected_components(mask) -> tuple:
    """26-connected component labels (int32) and count."""
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=FULL_CONNECTIVITY)
    return labels.astype(np.int32, copy=False), int(n)


def _regional_maxima(values, mask):
    """Plateau-aware regional maxima of ``values`` over ``mask`` (26-conn):
    a connected set of equal values none of whose neighbours is larger."""
    from skimage.morphology import local_maxima
    vals = np.where(mask, values, -np.inf)
    return local_maxima(vals, connectivity=3, allow_borders=True) & mask


def local_maxima(dist: Volume, mask: Volume, min_separation_mm: float = 5.0,
                 components: np.ndarray | None = None, squared: np.ndarray | None = None) -> list:
    """Seed candidates: one per regional-maximum plateau of ``dist`` (the
    plateau voxel nearest its centroid), then, per component, maxima closer
    than ``min_separation_mm`` to an already accepted deeper one are
    dropped.  Every component keeps its deepest maximum.

    ``squared`` optionally gives exact squared distances for the maximum test.
    """
    m = np.asarray(mask.data) > 0
    if not m.any():
        return []
    if components is None:
        components, _ = connected_components(m)
    # crop to the mask bounding box
    idx = np.argwhere(m)
    lo = np.maximum(idx.min(0) - 1, 0)
    hi = np.minimum(idx.max(0) + 2, m.shape)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    key = squared[sl] if squared is not None else np.asarray(dist.data, np.float64)[sl]
    maxima = _regional_maxima(key, m[sl])
    plateaus, n_plateaus = ndimage.label(maxima, structure=FULL_CONNECTIVITY)
    spacing = np.asarray(dist.spacing_mm)
    dist_data = np.asarray(dist.data)
    cands = []
    if n_plateaus:
        objects = ndimage.find_objects(plateaus)
        for pid, box in enumerate(objects, start=1):
            pts = np.argwhere(plateaus[box] == pid) + [b.start for b in box]
            centroid = pts.mean(axis=0)
            d2 = (((pts - centroid) * spacing) ** 2).sum(axis=1)
            best = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], d2))[0]] + lo
            z, y, x = (int(v) for v in best)
            cands.append((float(dist_data[z, y, x]), (z, y, x), int(components[z, y, x])))
    cands.sort(key=lambda c: (-c[0], c[1]))
    kept: dict = {}
    seeds = []
    for depth, coord, comp in cands:
        pos = np.asarray(coord) * spacing
        others = kept.setdefault(comp, [])
        if any(np.sqrt(((pos - o) ** 2).sum()) < min_separation_mm for o in others):
            continue
        others.append(pos)
        seeds.append(SeedPoint(VoxelCoord(*coord), depth, comp, 0.0))
    return seeds


@dataclass
class SeedResult:
    seeds: list
    consensus: Volume
    components: np.ndarray
    timings: dict = field(default_factory=dict)


def seeds_from_posteriors(posteriors, tau: float = 0.9, rule: str = "majority",
                          min_separation_mm: float = 5.0) -> SeedResult:
    """Consensus -> components -> EDT -> regional maxima, given member
    posterior volumes.  Seeds are sorted by EDT depth, deepest first."""
    t0 = time.perf_counter()
    cons = consensus(posteriors, tau, rule)
    m = cons.data > 0
    comps, _ = connected_components(m)
    seeds = []
    if m.any():
        idx = np.argwhere(m)
        lo = np.maximum(idx.min(0) - 1, 0)
        hi = np.minimum(idx.max(0) + 2, m.shape)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        d2 = np.zeros(m.shape)
        # space outside the crop is unset, as outside the grid, so the
        # crop-local transform equals the full one
        d2[sl] = squared_edt(m[sl], cons.spacing_mm)
        dist = cons.like(np.sqrt(d2).astype(np.float32))
        seeds = local_maxima(dist, cons, min_separation_mm, comps, squared=d2)
        stack = np.stack([np.asarray(p.data) for p in posteriors])
        for s in seeds:
            s.mean_posterior = float(stack[(slice(None),) + s.coord.as_tuple()].mean())
    t1 = time.perf_counter()
    return SeedResult(seeds, cons, comps, {"extract_s": t1 - t0})


def member_posteriors(model: EnsembleModel, channels: np.ndarray, breast_mask: Volume,
                      threads: int = 1) -> list:
    """Posterior volume of every member.  With ``threads`` > 1 members run
    concurrently with single-threaded BLAS each; results do not depend on
    the schedule."""
    from .net.infer import infer_volume
    if threads <= 1 or len(model.members) == 1:
        return [infer_volume(p, channels, breast_mask) for p in model.members]
    from concurrent.futures import ThreadPoolExecutor

    from threadpoolctl import threadpool_limits
    with threadpool_limits(1), ThreadPoolExecutor(min(threads, len(model.members))) as pool:
        return list(pool.map(lambda p: infer_volume(p, channels, breast_mask), model.members))


def generate_seeds(model: EnsembleModel, channels: np.ndarray, breast_mask: Volume,
                   min_separation_mm: float = 5.0, threads: int = 1) -> SeedResult:
    """Full seed generation for one case from its channel stack."""
    t0 = time.perf_counter()
    posts = member_posteriors(model, channels, breast_mask, threads)
    t1 = time.perf_counter()
    res = seeds_from_posteriors(posts, model.tau, model.rule, min_separation_mm)
    res.timings["inference_s"] = t1 - t0
    res.timings["total_s"] = time.perf_counter() - t0
    return res


def seeds_to_json(seeds) -> list:
    return [s.to_dict() for s in seeds]
