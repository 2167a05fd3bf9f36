"""Network parameters, forward passes and the training loss.

All images are channels-last: a single image is (H, W, C), a batch is
(B, H, W, C).  Computation runs in the dtype of the parameters, so casting
params and inputs to float64 gives the double-precision gradient-check path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np

from .arch import Architecture, param_count, receptive_field
from .conv import conv_backward, conv_forward, im2col, kernel_matrix

DEFAULT_ARCH = Architecture.default()
assert param_count(DEFAULT_ARCH) == 57_506
assert receptive_field(DEFAULT_ARCH) == 97


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


@dataclass
class NetworkParams:
    arch: Architecture
    weights: list  # [(kernel (out, in, k, k), bias (out,)), ...]
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.weights[0][0].dtype

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.arch, [(w.astype(dtype), b.astype(dtype)) for w, b in self.weights],
                             self.seed, dict(self.extra))

    def copy(self) -> "NetworkParams":
        return self.astype(self.dtype)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for wb in self.weights for a in wb])


def init_params(arch: Architecture = DEFAULT_ARCH, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer in arch.layers:
        fan_in = layer.in_ch * layer.kernel * layer.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
        weights.append((w.astype(dtype), np.zeros(layer.out_ch, dtype)))
    return NetworkParams(arch, weights, seed)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _run(params: NetworkParams, x: np.ndarray, plan=None):
    """Forward through all layers.  Returns (logits, caches, activations)
    where activations[i] is the post-ReLU output of layer i."""
    caches, acts = [], []
    n = len(params.arch.layers)
    for i, (layer, (w, b)) in enumerate(zip(params.arch.layers, params.weights)):
        dilation, stride = (layer.dilation, 1) if plan is None else plan[i]
        out, cols = conv_forward(x, w, b, dilation, stride)
        caches.append((x.shape, cols, dilation, stride))
        if i < n - 1:
            np.maximum(out, 0, out=out)
        acts.append(out)
        x = out
    return x, caches, acts


def _backprop(params: NetworkParams, dlogits: np.ndarray, caches, acts):
    grads = [None] * len(params.weights)
    d = dlogits
    for i in range(len(params.weights) - 1, -1, -1):
        x_shape, cols, dilation, stride = caches[i]
        if i < len(params.weights) - 1:
            d = d * (acts[i] > 0)
        dx, dw, db = conv_backward(d, cols, x_shape if i > 0 else None,
                                   params.weights[i][0], dilation, stride)
        grads[i] = (dw, db)
        d = dx
    return grads


def forward_logits(params: NetworkParams, batch: np.ndarray) -> np.ndarray:
    """Valid-mode logits for a (B, H, W, C) batch; output (B, H-2m, W-2m, K)."""
    batch = np.asarray(batch, dtype=params.dtype)
    m = params.arch.margin
    if batch.shape[1] < 2 * m + 1 or batch.shape[2] < 2 * m + 1:
        raise ValueError(f"valid mode needs at least {2 * m + 1}x{2 * m + 1} input, "
                         f"got {batch.shape[1]}x{batch.shape[2]}")
    logits, _, _ = _run(params, batch)
    return logits


def predict_logits(params: NetworkParams, batch: np.ndarray, tile_rows: int = 16) -> np.ndarray:
    """Same result as :func:`forward_logits` without keeping backward caches;
    each layer is computed in bands of output rows so the im2col buffer
    stays small."""
    x = np.ascontiguousarray(batch, dtype=params.dtype)
    m = params.arch.margin
    if x.shape[1] < 2 * m + 1 or x.shape[2] < 2 * m + 1:
        raise ValueError(f"valid mode needs at least {2 * m + 1}x{2 * m + 1} input, "
                         f"got {x.shape[1]}x{x.shape[2]}")
    n = len(params.arch.layers)
    for i, (layer, (w, b)) in enumerate(zip(params.arch.layers, params.weights)):
        k, d = layer.kernel, layer.dilation
        span = d * (k - 1)
        ho, wo = x.shape[1] - span, x.shape[2] - span
        wm = kernel_matrix(w)
        out = np.empty((x.shape[0], ho, wo, w.shape[0]), dtype=x.dtype)
        for r0 in range(0, ho, tile_rows):
            r1 = min(r0 + tile_rows, ho)
            cols = im2col(x[:, r0:r1 + span], k, d, 1)
            np.matmul(cols, wm, out=out[:, r0:r1])
        out += b
        if i < n - 1:
            np.maximum(out, 0, out=out)
        x = out
    return x


def reflect_pad(image: np.ndarray, pad: int) -> np.ndarray:
    """Mirror-pad the two spatial axes of (..., H, W, C) without repeating the
    edge pixel.  Axes shorter than the pad are mirrored repeatedly."""
    widths = [(0, 0)] * (image.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    if min(image.shape[-3], image.shape[-2]) == 1:
        return np.pad(image, widths, mode="symmetric")
    return np.pad(image, widths, mode="reflect")


def forward(params: NetworkParams, image: np.ndarray, mode: str = "valid") -> np.ndarray:
    """Posterior map (H', W', K) for one (H, W, C) image.

    ``valid``: output shrinks by the receptive-field margin on every border.
    ``reflect``: the image is mirror-padded by the margin first, so the
    output has the input's size.
    """
    image = np.asarray(image)
    if mode == "reflect":
        image = reflect_pad(image, params.arch.margin)
    elif mode != "valid":
        raise ValueError(f"unknown mode {mode!r}")
    return softmax(forward_logits(params, image[None]))[0]


def _cone_plan(arch: Architecture):
    """Input subsampling and per-layer (grid dilation, grid stride) for
    evaluating only the centre output pixel of a receptive-field window.

    Layer i only needs its outputs on the lattice whose spacing is the gcd of
    all later dilations, so every dilated layer becomes a strided one.
    """
    g_in = 0
    for layer in arch.layers:
        if layer.kernel > 1:
            g_in = gcd(g_in, layer.dilation)
    prev = max(g_in, 1)
    plan = []
    for layer, g_out in zip(arch.layers, arch.cone_strides()):
        dil = layer.dilation // prev if layer.kernel > 1 else 1
        stride = g_out // prev if g_out else 1
        plan.append((dil, stride))
        prev = g_out or prev
    return max(g_in, 1), plan


def center_logits(params: NetworkParams, patches: np.ndarray, return_cache: bool = False):
    """Logits of the centre pixel of each patch, computed only on the
    receptive-field cone of that pixel.

    Equals ``forward_logits(params, patches)`` at the centre output pixel.
    Patches must be at least receptive-field sized and odd-sized.
    """
    patches = np.asarray(patches, dtype=params.dtype)
    rf = receptive_field(params.arch)
    h, w = patches.shape[1], patches.shape[2]
    if h < rf or w < rf or h % 2 == 0 or w % 2 == 0:
        raise ValueError(f"patches must be odd-sized and at least {rf}x{rf}, got {h}x{w}")
    oy, ox = (h - rf) // 2, (w - rf) // 2
    x = patches[:, oy:oy + rf, ox:ox + rf, :]
    g_in, plan = _cone_plan(params.arch)
    if g_in > 1:
        x = x[:, ::g_in, ::g_in, :]
    logits, caches, acts = _run(params, np.ascontiguousarray(x), plan)
    assert logits.shape[1:3] == (1, 1), logits.shape
    logits = logits[:, 0, 0, :]
    if return_cache:
        return logits, (caches, acts)
    return logits


def loss_and_grad(params: NetworkParams, patches: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of the centre pixel of each patch and its exact
    gradient.  Returns (loss, [(d_kernel, d_bias), ...])."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, (caches, acts) = center_logits(params, patches, return_cache=True)
    n = logits.shape[0]
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss}")
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    dlogits = (p / n).astype(params.dtype)[:, None, None, :]
    return loss, _backprop(params, dlogits, caches, acts)
