"""Whole-volume, slice-wise inference with a trained network."""

from __future__ import annotations

import numpy as np

from ..core import Volume
from .model import NetworkParams, predict_logits, reflect_pad, softmax


def infer_volume(params: NetworkParams, channels: np.ndarray, breast_mask: Volume) -> Volume:
    """Tumor-class posterior for every voxel, 0 outside the breast mask.

    Each transversal slice is mirror-padded and classified in one valid-mode
    pass.  Only slices containing breast voxels are computed, each cropped to
    the in-plane bounding box of its mask voxels; the crop keeps the full
    receptive field of every computed voxel, so results equal whole-slice
    inference.
    """
    channels = np.asarray(channels, np.float32)
    mask = np.asarray(breast_mask.data) > 0
    if channels.shape[:3] != mask.shape:
        raise ValueError(f"channels {channels.shape[:3]} and mask {mask.shape} differ in shape")
    out = np.zeros(mask.shape, np.float32)
    m = params.arch.margin
    for z in np.flatnonzero(mask.any(axis=(1, 2))):
        ys = np.flatnonzero(mask[z].any(axis=1))
        xs = np.flatnonzero(mask[z].any(axis=0))
        y0, y1, x0, x1 = ys[0], ys[-1] + 1, xs[0], xs[-1] + 1
        padded = reflect_pad(channels[z], m)
        crop = padded[y0:y1 + 2 * m, x0:x1 + 2 * m]
        out[z, y0:y1, x0:x1] = softmax(predict_logits(params, crop[None]))[0, ..., 1]
    out[~mask] = 0.0
    return breast_mask.like(out)
