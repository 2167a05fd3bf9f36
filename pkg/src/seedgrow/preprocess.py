"""Network input channels: normalized precontrast, washin and washout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import DceCase, Volume, masked_mean, masked_percentile


class DegenerateImageError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStack:
    pre: Volume      # normalized precontrast, [0, 1]
    washin: Volume
    washout: Volume

    def array(self) -> np.ndarray:
        """Channels-last (nz, ny, nx, 3) float32 array in network order."""
        return np.stack([self.pre.data, self.washin.data, self.washout.data], axis=-1)

    @property
    def volumes(self) -> tuple:
        return (self.pre, self.washin, self.washout)


def _check_same(a: Volume, b: Volume):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def bias_correct(vol: Volume, mask: Volume, sigma_mm: float = 25.0, passes: int = 2) -> Volume:
    """Homomorphic field correction.

    The bias is a mask-normalized Gaussian blur of the masked image divided by
    the masked mean; voxels under the mask are divided by it (floored at
    0.1), voxels outside pass through.  Each further pass re-estimates the
    residual bias of the corrected image, which mainly removes the error the
    one-sided blur leaves near the mask boundary.
    """
    _check_same(vol, mask)
    m = np.asarray(mask.data) > 0
    if not m.any():
        raise ValueError("mask is empty")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    img = vol.data.astype(np.float64)
    sigma_vox = [sigma_mm / s for s in vol.spacing_mm]
    den = gaussian_filter(m.astype(np.float64), sigma_vox, mode="constant")
    out = img.copy()
    for _ in range(passes):
        num = gaussian_filter(np.where(m, out, 0.0), sigma_vox, mode="constant")
        local = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)
        bias = local / out[m].mean()
        out[m] = out[m] / np.maximum(bias[m], 0.1)
    return vol.like(out.astype(np.float32))


def normalize_percentile(vol: Volume, mask: Volume, lo: float = 5.0, hi: float = 95.0) -> Volume:
    """Map the masked 5th/95th percentiles to 0/1 and clamp to [0, 1]."""
    _check_same(vol, mask)
    p_lo = masked_percentile(vol, mask, lo)
    p_hi = masked_percentile(vol, mask, hi)
    if not p_hi > p_lo:
        raise DegenerateImageError(f"constant image under mask: p{lo:g} == p{hi:g} == {p_lo}")
    out = (vol.data.astype(np.float64) - p_lo) / (p_hi - p_lo)
    return vol.like(np.clip(out, 0.0, 1.0).astype(np.float32))


def default_eps(ref: Volume, mask: Volume | None = None) -> float:
    """1e-3 times the (masked) mean of the reference image."""
    mean = masked_mean(ref, mask) if mask is not None else float(ref.data.mean(dtype=np.float64))
    return max(1e-3 * abs(mean), np.finfo(np.float32).tiny)


def relative_change(before: Volume, after: Volume, eps: float) -> Volume:
    _check_same(before, after)
    b = before.data.astype(np.float64)
    out = (after.data.astype(np.float64) - b) / np.maximum(b, eps)
    return before.like(out.astype(np.float32))


def washin(pre: Volume, post1: Volume, eps: float | None = None, mask: Volume | None = None) -> Volume:
    """(post1 - pre) / max(pre, eps)."""
    return relative_change(pre, post1, default_eps(pre, mask) if eps is None else eps)


def washout(post1: Volume, post_last: Volume, eps: float | None = None,
            mask: Volume | None = None) -> Volume:
    """(post_last - post1) / max(post1, eps); negative for tumor-like curves."""
    return relative_change(post1, post_last, default_eps(post1, mask) if eps is None else eps)


def build_channels(case: DceCase, bias_correction: bool = True, sigma_mm: float = 25.0,
                   bias_passes: int = 2) -> ChannelStack:
    """Stack (normalized precontrast, washin, washout) for one case.

    The kinetic maps are zeroed outside the breast mask so the network only
    ever sees breast enhancement.
    """
    mask = case.breast_mask
    pre = bias_correct(case.pre, mask, sigma_mm, bias_passes) if bias_correction else case.pre
    c0 = normalize_percentile(pre, mask)
    inside = np.asarray(mask.data) > 0
    c1 = washin(case.pre, case.post[0], mask=mask)
    c2 = washout(case.post[0], case.post[-1], mask=mask)
    c1 = c1.like(np.where(inside, c1.data, 0.0))
    c2 = c2.like(np.where(inside, c2.data, 0.0))
    return ChannelStack(c0, c1, c2)


def otsu_breast_mask(pre: Volume) -> Volume:
    """Fallback breast mask for inputs without one: Otsu threshold of the
    precontrast image, largest 26-connected component, holes filled."""
    from scipy.ndimage import binary_fill_holes, label
    from skimage.filters import threshold_otsu

    data = pre.data
    fg = data > threshold_otsu(data)
    labels, n = label(fg, structure=np.ones((3, 3, 3)))
    if n == 0:
        raise DegenerateImageError("no foreground found")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = binary_fill_holes(labels == sizes.argmax())
    return pre.like(mask.astype(np.uint8))
