"""Deterministic synthetic DCE-MRI cases with ground truth.

A case is built in two stages: :func:`sample_anatomy` draws every geometric
and kinetic parameter from ``(rng_seed, case_index)``, and :func:`render`
turns an anatomy plus a noise realization into volumes.  NAC shrinkage
re-renders the same anatomy with scaled tumors and fresh noise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .core import DceCase, Volume, read_volume, write_volume

log = logging.getLogger(__name__)

PRE_RANGE = (60.0, 100.0)       # parenchyma precontrast signal
LESION_PRE_RANGE = (70.0, 90.0)
OUTSIDE_SIGNAL = 5.0
PARENCHYMA_WASHIN = (0.05, 0.30)
PARENCHYMA_WASHOUT = (0.0, 0.15)
TUMOR_WASHIN = (0.8, 1.6)
TUMOR_WASHOUT = (-0.5, -0.2)
VESSEL_LENGTH_STEPS = (60, 161)
VESSEL_WASHIN = (0.8, 1.6)
VESSEL_WASHOUT = (-0.3, 0.3)
BENIGN_WASHIN = (0.3, 0.7)
BENIGN_WASHOUT = (0.0, 0.3)


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple = (96, 128, 128)
    spacing_mm: tuple = (1.35, 1.35, 1.35)
    n_post: int = 4
    tumor_count_range: tuple = (1, 1)
    tumor_radius_mm_range: tuple = (5.0, 19.0)
    # minor/major semi-axis ratio range; (1, 1) gives spheres
    tumor_aspect_range: tuple = (0.75, 1.0)
    vessel_count_range: tuple = (1, 3)
    vessel_radius_vox_range: tuple = (1.0, 2.0)
    benign_count_range: tuple = (0, 3)
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if len(self.shape) != 3 or min(self.shape) < 32:
            raise ValueError(f"phantom shape must be >= 32 per axis, got {self.shape}")
        if min(self.spacing_mm) <= 0:
            raise ValueError("spacing must be positive")
        if self.n_post < 2:
            raise ValueError("n_post must be >= 2")
        for name in ("tumor_count_range", "tumor_radius_mm_range", "tumor_aspect_range",
                     "vessel_count_range", "vessel_radius_vox_range", "benign_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a nonempty nonnegative range, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.tumor_radius_mm_range[0] <= 0:
            raise ValueError("tumor radius must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class Tumor:
    center_vox: list
    semi_axes_mm: list
    rotation: list  # 3x3, rows are the principal directions (z, y, x components)
    washin: float
    washout: float
    pre_signal: float

    @property
    def volume_mm3(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * np.pi * a * b * c


@dataclass
class Vessel:
    points_vox: list
    radius_vox: float
    washin: float
    washout: float
    pre_signal: float


@dataclass
class Benign:
    center_vox: list
    radius_vox: float
    washin: float
    washout: float
    pre_signal: float


@dataclass
class PhantomAnatomy:
    config: PhantomConfig
    case_index: int
    breast_center_vox: list
    breast_semi_axes_vox: list
    texture_seed: int
    bias_coeffs: list
    tumors: list = field(default_factory=list)
    vessels: list = field(default_factory=list)
    benign: list = field(default_factory=list)
    noise_realization: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomAnatomy":
        d = dict(d)
        d["config"] = PhantomConfig.from_dict(d["config"])
        d["tumors"] = [Tumor(**t) for t in d.get("tumors", [])]
        d["vessels"] = [Vessel(**v) for v in d.get("vessels", [])]
        d["benign"] = [Benign(**b) for b in d.get("benign", [])]
        return cls(**d)


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def _breast_mask(shape, center, semi):
    z, y, x = _grid(shape)
    r = ((z - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + ((x - center[2]) / semi[2]) ** 2
    return (r <= 1.0) & (y >= center[1])


def _ellipsoid_mask(shape, spacing, tumor: Tumor):
    """Voxels whose centres lie inside the tumor ellipsoid."""
    a = np.asarray(tumor.semi_axes_mm, np.float64)
    rot = np.asarray(tumor.rotation, np.float64)
    c = np.asarray(tumor.center_vox, np.float64)
    reach = int(np.ceil(a.max() / min(spacing))) + 1
    lo = np.maximum(np.floor(c).astype(int) - reach, 0)
    hi = np.minimum(np.floor(c).astype(int) + reach + 2, shape)
    out = np.zeros(shape, bool)
    if np.any(hi <= lo):
        return out
    zz, yy, xx = np.meshgrid(*[np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)], indexing="ij")
    d = np.stack([(zz - c[0]) * spacing[0], (yy - c[1]) * spacing[1], (xx - c[2]) * spacing[2]], -1)
    local = d @ rot.T
    inside = ((local / a) ** 2).sum(-1) <= 1.0
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
    return out


def _balls_mask(shape, centers, radius):
    out = np.zeros(shape, bool)
    reach = int(np.ceil(radius))
    offs = np.argwhere(np.ones((2 * reach + 1,) * 3, bool)) - reach
    offs = offs[(offs ** 2).sum(1) <= radius ** 2]
    for c in np.rint(np.asarray(centers, np.float64)).astype(int).reshape(-1, 3):
        p = c + offs
        ok = np.all((p >= 0) & (p < np.asarray(shape)), axis=1)
        p = p[ok]
        out[p[:, 0], p[:, 1], p[:, 2]] = True
    return out


def _texture(shape, rng, sigma_vox=4.0):
    t = gaussian_filter(rng.standard_normal(shape), sigma_vox, mode="reflect")
    t -= t.min()
    span = t.max()
    return t / span if span > 0 else t


def _bias_field(shape, coeffs):
    z, y, x = [g / max(n - 1, 1) * 2 - 1 for g, n in zip(_grid(shape), shape)]
    terms = [z, y, x, z * z, y * y, x * x, z * y, z * x, y * x]
    q = sum(c * t for c, t in zip(coeffs, terms))
    peak = np.abs(q).max()
    return q / peak if peak > 0 else q


def sample_anatomy(cfg: PhantomConfig, case_index: int) -> PhantomAnatomy:
    """Draw all structures of case ``case_index``.

    Raises PhantomError if a tumor cannot be placed inside the breast after
    100 attempts.
    """
    rng = np.random.default_rng([cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, case_index, 0])
    nz, ny, nx = cfg.shape
    center = [nz / 2 - 0.5 + rng.uniform(-1, 1), ny * 0.12, nx / 2 - 0.5 + rng.uniform(-1, 1)]
    semi = [nz * rng.uniform(0.42, 0.47), ny * rng.uniform(0.80, 0.86), nx * rng.uniform(0.42, 0.47)]
    breast = _breast_mask(cfg.shape, center, semi)
    # keep lesions two voxels away from the skin/chest wall
    from scipy.ndimage import binary_erosion
    interior = binary_erosion(breast, iterations=2)
    spacing = cfg.spacing_mm

    anatomy = PhantomAnatomy(
        config=cfg,
        case_index=int(case_index),
        breast_center_vox=[float(v) for v in center],
        breast_semi_axes_vox=[float(v) for v in semi],
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        bias_coeffs=[float(v) for v in rng.uniform(-1, 1, 9)],
    )

    occupied = np.zeros(cfg.shape, bool)
    n_tumors = int(rng.integers(cfg.tumor_count_range[0], cfg.tumor_count_range[1] + 1))
    candidates = np.argwhere(interior)
    for _ in range(n_tumors):
        for _attempt in range(100):
            r = rng.uniform(*cfg.tumor_radius_mm_range)
            semi_axes = sorted([r, r * rng.uniform(*cfg.tumor_aspect_range),
                                r * rng.uniform(*cfg.tumor_aspect_range)], reverse=True)
            rot = Rotation.random(random_state=rng).as_matrix()
            c = candidates[rng.integers(len(candidates))].astype(np.float64)
            tumor = Tumor([float(v) for v in c], [float(v) for v in semi_axes], rot.tolist(),
                          float(rng.uniform(*TUMOR_WASHIN)), float(rng.uniform(*TUMOR_WASHOUT)),
                          float(rng.uniform(*LESION_PRE_RANGE)))
            m = _ellipsoid_mask(cfg.shape, spacing, tumor)
            if m.any() and not (m & ~interior).any() and not (m & occupied).any():
                anatomy.tumors.append(tumor)
                occupied |= m
                break
        else:
            raise PhantomError(f"could not place tumor inside breast mask (case {case_index})")

    # lesion-free zone around tumors so vessels/benign foci never touch them,
    # not even after shrinkage
    keep_out = _dilate(occupied, 3)

    n_vessels = int(rng.integers(cfg.vessel_count_range[0], cfg.vessel_count_range[1] + 1))
    for _ in range(n_vessels):
        radius = float(rng.uniform(*cfg.vessel_radius_vox_range))
        for _attempt in range(20):
            p = candidates[rng.integers(len(candidates))].astype(np.float64)
            if not keep_out[tuple(p.astype(int))]:
                break
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        length = int(rng.integers(*VESSEL_LENGTH_STEPS))

        def free(q):
            idx = tuple(np.rint(q).astype(int))
            return (all(0 <= i < n for i, n in zip(idx, cfg.shape))
                    and interior[idx] and not keep_out[idx])

        pts = []
        if free(p):
            pts.append([float(v) for v in p])
        while pts and len(pts) < length:
            # wiggle; turn away from the breast border or a tumor when blocked
            for turn in range(12):
                trial = direction + rng.normal(0, 0.15 if turn == 0 else 0.6, 3)
                trial /= np.linalg.norm(trial)
                if free(p + trial):
                    break
            else:
                break
            direction = trial
            p = p + direction
            pts.append([float(v) for v in p])
        if len(pts) >= 5:
            anatomy.vessels.append(Vessel(pts, radius, float(rng.uniform(*VESSEL_WASHIN)),
                                          float(rng.uniform(*VESSEL_WASHOUT)),
                                          float(rng.uniform(*LESION_PRE_RANGE))))

    n_benign = int(rng.integers(cfg.benign_count_range[0], cfg.benign_count_range[1] + 1))
    for _ in range(n_benign):
        radius = float(rng.uniform(1.5, 3.0))
        for _attempt in range(20):
            c = candidates[rng.integers(len(candidates))]
            if not keep_out[tuple(c)]:
                anatomy.benign.append(Benign([float(v) for v in c], radius,
                                             float(rng.uniform(*BENIGN_WASHIN)),
                                             float(rng.uniform(*BENIGN_WASHOUT)),
                                             float(rng.uniform(*LESION_PRE_RANGE))))
                break
    return anatomy


def _dilate(mask, iterations):
    from scipy.ndimage import binary_dilation
    return binary_dilation(mask, iterations=iterations) if mask.any() else mask


def render(anatomy: PhantomAnatomy, case_id: str | None = None) -> DceCase:
    """Volumes of one anatomy under its noise realization."""
    cfg = anatomy.config
    shape, spacing = cfg.shape, cfg.spacing_mm
    breast = _breast_mask(shape, anatomy.breast_center_vox, anatomy.breast_semi_axes_vox)

    trng = np.random.default_rng(anatomy.texture_seed)
    pre = np.full(shape, OUTSIDE_SIGNAL)
    washin = np.zeros(shape)
    washout = np.zeros(shape)
    tex = _texture(shape, trng)
    pre[breast] = (PRE_RANGE[0] + (PRE_RANGE[1] - PRE_RANGE[0]) * tex)[breast]
    washin[breast] = (PARENCHYMA_WASHIN[0] + np.diff(PARENCHYMA_WASHIN)[0] * _texture(shape, trng))[breast]
    washout[breast] = (PARENCHYMA_WASHOUT[0] + np.diff(PARENCHYMA_WASHOUT)[0] * _texture(shape, trng))[breast]

    vessel = np.zeros(shape, bool)
    for v in anatomy.vessels:
        m = _balls_mask(shape, v.points_vox, v.radius_vox) & breast
        pre[m], washin[m], washout[m] = v.pre_signal, v.washin, v.washout
        vessel |= m
    benign = np.zeros(shape, bool)
    for b in anatomy.benign:
        m = _balls_mask(shape, [b.center_vox], b.radius_vox) & breast
        pre[m], washin[m], washout[m] = b.pre_signal, b.washin, b.washout
        benign |= m
    tumor_labels = np.zeros(shape, np.uint8)
    volumes = {}
    for label, t in enumerate(anatomy.tumors, start=1):
        m = _ellipsoid_mask(shape, spacing, t) & breast
        pre[m], washin[m], washout[m] = t.pre_signal, t.washin, t.washout
        tumor_labels[m] = label
        volumes[label] = t.volume_mm3
    tumor = tumor_labels > 0
    vessel &= ~tumor
    benign &= ~tumor

    # piecewise-linear enhancement: pre -> peak at frame 1 -> linear to last frame
    s1 = pre * (1.0 + washin)
    s_last = s1 * (1.0 + washout)
    frames = [pre]
    for k in range(cfg.n_post):
        frames.append(s1 + (s_last - s1) * (k / (cfg.n_post - 1)))

    bias = 1.0 + cfg.bias_amplitude * _bias_field(shape, anatomy.bias_coeffs)
    noise_rng = np.random.default_rng(
        [cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, anatomy.case_index, 1, anatomy.noise_realization])
    noise_scale = cfg.noise_sigma * float(pre[breast].mean())
    out = []
    for f in frames:
        img = f * bias
        if noise_scale > 0:
            img = img + noise_rng.normal(0.0, noise_scale, shape)
        out.append(Volume(img.astype(np.float32), spacing))

    u8 = lambda m: Volume(m.astype(np.uint8), spacing)
    return DceCase(
        pre=out[0],
        post=out[1:],
        breast_mask=u8(breast),
        case_id=case_id or f"case{anatomy.case_index:03d}",
        gt_tumor=Volume(tumor_labels, spacing),
        gt_vessel=u8(vessel),
        gt_benign=u8(benign),
        gt_tumor_volumes=volumes,
        anatomy=anatomy,
    )


def generate_case(cfg: PhantomConfig, case_index: int) -> DceCase:
    """Deterministic phantom case for ``(cfg.rng_seed, case_index)``."""
    return render(sample_anatomy(cfg, case_index))


def simulate_nac(case: DceCase, shrink_factor: float) -> DceCase:
    """Same anatomy with every tumor semi-axis scaled by ``shrink_factor``
    about its centre, rendered under a new noise realization."""
    if not 0 < shrink_factor <= 1:
        raise ValueError(f"shrink factor must be in (0, 1], got {shrink_factor}")
    if not isinstance(case.anatomy, PhantomAnatomy):
        raise ValueError("simulate_nac needs a phantom case with its anatomy")
    a = case.anatomy
    shrunk = replace(
        a,
        tumors=[replace(t, semi_axes_mm=[s * shrink_factor for s in t.semi_axes_mm]) for t in a.tumors],
        noise_realization=a.noise_realization + 1,
    )
    return render(shrunk, case_id=f"{case.case_id}_nac")


def save_case(case: DceCase, directory) -> Path:
    """Write member volumes plus a ``case.json`` manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(case.pre, directory / "pre")
    post_names = []
    for i, v in enumerate(case.post, start=1):
        write_volume(v, directory / f"post{i}")
        post_names.append(f"post{i}")
    write_volume(case.breast_mask, directory / "breast_mask")
    manifest = {"case_id": case.case_id, "pre": "pre", "post": post_names, "breast_mask": "breast_mask"}
    for name in ("gt_tumor", "gt_vessel", "gt_benign"):
        vol = getattr(case, name)
        if vol is not None:
            write_volume(vol, directory / name)
            manifest[name] = name
    manifest["gt_tumor_volumes_mm3"] = {str(k): v for k, v in case.gt_tumor_volumes.items()}
    if isinstance(case.anatomy, PhantomAnatomy):
        manifest["anatomy"] = case.anatomy.to_dict()
    path = directory / "case.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_case(path) -> DceCase:
    path = Path(path)
    if path.is_dir():
        path = path / "case.json"
    manifest = json.loads(path.read_text())
    root = path.parent
    opt = lambda key: read_volume(root / manifest[key]) if manifest.get(key) else None
    anatomy = manifest.get("anatomy")
    return DceCase(
        pre=read_volume(root / manifest["pre"]),
        post=[read_volume(root / p) for p in manifest["post"]],
        breast_mask=read_volume(root / manifest["breast_mask"]),
        case_id=manifest.get("case_id", root.name),
        gt_tumor=opt("gt_tumor"),
        gt_vessel=opt("gt_vessel"),
        gt_benign=opt("gt_benign"),
        gt_tumor_volumes={int(k): float(v) for k, v in manifest.get("gt_tumor_volumes_mm3", {}).items()},
        anatomy=PhantomAnatomy.from_dict(anatomy) if anatomy else None,
    )
