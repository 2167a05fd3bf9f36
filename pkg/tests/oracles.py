"""Independent reference computations used by the test-suite."""

from __future__ import annotations

import itertools

import numpy as np

from seedgrow.net.conv import conv_forward
from seedgrow.net.model import _cone_plan


def _ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]


class _ConeEvaluator:
    """Exact forward evaluation of the centre-pixel loss after perturbing
    one parameter, reporting whether any ReLU changed sign."""

    def __init__(self, params, patches, labels):
        self.params = params.astype(np.float64)
        patches = np.asarray(patches, np.float64)
        rf = 1 + sum(l.dilation * (l.kernel - 1) for l in self.params.arch.layers)
        oy, ox = (patches.shape[1] - rf) // 2, (patches.shape[2] - rf) // 2
        g_in, self.plan = _cone_plan(self.params.arch)
        x = patches[:, oy:oy + rf:g_in, ox:ox + rf:g_in, :]
        self.labels = np.asarray(labels)
        self.n = len(self.params.weights)
        self.pre, self.cols = [], []
        for i, (w, b) in enumerate(self.params.weights):
            z, cols = conv_forward(x, w, b, *self.plan[i])
            self.pre.append(z)
            self.cols.append(cols)
            x = np.maximum(z, 0) if i < self.n - 1 else z
        self.l0 = float(_ce(self.pre[-1][:, 0, 0, :], self.labels).mean())

    def _losses(self, z, start, reps, flipped):
        """Run from layer ``start`` given its stacked pre-activation."""
        bsz = len(self.labels)
        x = None
        for i in range(start, self.n):
            if i > start:
                w, b = self.params.weights[i]
                z, _ = conv_forward(x, w, b, *self.plan[i])
            if i < self.n - 1:
                base = self.pre[i] > 0
                changed = (z > 0).reshape(reps, *base.shape) != base[None]
                flipped |= changed.reshape(reps, -1).any(axis=1)
                x = np.maximum(z, 0)
        losses = _ce(z[:, 0, 0, :], np.tile(self.labels, reps))
        return losses.reshape(reps, bsz).mean(axis=1), flipped

    def perturbed(self, li, o, cols, steps):
        """Losses after adding steps[n] to one parameter feeding output
        channel ``o`` of layer ``li``; ``cols`` are tap columns (None for the
        bias).  Only channel o of layer li moves, so layer li+1 is updated
        with a single-input-channel convolution."""
        reps = len(steps)
        z_o = self.pre[li][..., o]
        delta = np.stack([s * (np.ones_like(z_o) if c is None else self.cols[li][..., c])
                          for c, s in zip(cols, steps)])
        z_new = z_o[None] + delta
        if li == self.n - 1:
            logits = np.repeat(self.pre[li][None], reps, axis=0)
            logits[..., o] = z_new
            logits = logits.reshape(-1, *self.pre[li].shape[1:])
            losses = _ce(logits[:, 0, 0, :], np.tile(self.labels, reps))
            return losses.reshape(reps, -1).mean(axis=1), np.zeros(reps, bool)
        flipped = ((z_new > 0) != (z_o > 0)[None]).reshape(reps, -1).any(axis=1)
        d_act = (np.maximum(z_new, 0) - np.maximum(z_o, 0)[None]).reshape(-1, *z_o.shape[1:], 1)
        w_next = self.params.weights[li + 1][0][:, o:o + 1]
        dz, _ = conv_forward(d_act, w_next, np.zeros(w_next.shape[0]), *self.plan[li + 1])
        z_next = (self.pre[li + 1][None] + dz.reshape(reps, *self.pre[li + 1].shape))
        return self._losses(z_next.reshape(-1, *self.pre[li + 1].shape[1:]), li + 1, reps, flipped)


def _kinked_derivatives(ev, li, pending, h):
    """Derivatives of parameters whose central difference crossed a ReLU
    kink: shrink the step, or use a second-order one-sided difference on a
    side that stays on one linear piece.  ``pending`` maps key -> (o, col)."""
    out = {}
    for k in range(5):
        if not pending:
            break
        step = h / 10 ** k
        retry = {}
        by_channel = {}
        for key, (o, col) in pending.items():
            by_channel.setdefault(o, []).append((key, col))
        for o, entries in by_channel.items():
            for start in range(0, len(entries), 64):
                part = entries[start:start + 64]
                cols = [c for _, c in part for _r in range(4)]
                steps = [s for _ in part for s in (step, -step, 2 * step, -2 * step)]
                losses, flips = ev.perturbed(li, o, cols, steps)
                for n_i, (key, col) in enumerate(part):
                    lo, fl = losses[4 * n_i:4 * n_i + 4], flips[4 * n_i:4 * n_i + 4]
                    if not fl[0] and not fl[1]:
                        out[key] = (lo[0] - lo[1]) / (2 * step)
                    elif not fl[0] and not fl[2]:
                        out[key] = (-3 * ev.l0 + 4 * lo[0] - lo[2]) / (2 * step)
                    elif not fl[1] and not fl[3]:
                        out[key] = -(-3 * ev.l0 + 4 * lo[1] - lo[3]) / (2 * step)
                    else:
                        retry[key] = (o, col)
        pending = retry
    for key in pending:
        out[key] = np.nan
    return out


def finite_difference_grads(params, patches, labels, h=1e-5, chunk_elems=4_000_000,
                            layers=None, kink_aware=True):
    """Central finite differences of the mean centre-pixel cross-entropy with
    respect to every parameter (float64 throughout).

    Every perturbed loss is an exact forward evaluation: perturbing one kernel
    weight (or bias) of layer l shifts only one output channel of that layer
    by h times the matching input tap (or by h), so the rest of the network
    is re-run from that point.  Perturbations are batched per channel.

    Returns (grads, n_kinked) where grads mirrors ``params.weights``.
    """
    ev = _ConeEvaluator(params, patches, labels)
    bsz = len(ev.labels)
    grads, n_kinked = [], 0
    for li, (w, b) in enumerate(ev.params.weights):
        if layers is not None and li not in layers:
            grads.append(None)
            continue
        cout, cin, k, _ = w.shape
        gw, gb = np.zeros_like(w), np.zeros_like(b)
        nxt = ev.pre[li + 1][0].size if li + 1 < ev.n else 1
        per = max(1, chunk_elems // (2 * bsz * max(ev.pre[li][0].size, nxt)))
        pending = {}
        for o in range(cout):
            entries = [(("w", (o, c, i, j)), (i * k + j) * cin + c)
                       for c, i, j in itertools.product(range(cin), range(k), range(k))]
            entries.append((("b", o), None))
            for start in range(0, len(entries), per):
                part = entries[start:start + per]
                cols = [c for _, c in part for _s in (0, 1)]
                steps = [s for _ in part for s in (h, -h)]
                losses, flips = ev.perturbed(li, o, cols, steps)
                losses, flips = losses.reshape(-1, 2), flips.reshape(-1, 2).any(axis=1)
                for (key, col), (lp, lm), flip in zip(part, losses, flips):
                    if flip and kink_aware:
                        pending[key] = (o, col)
                    else:
                        (gw if key[0] == "w" else gb)[key[1]] = (lp - lm) / (2 * h)
        n_kinked += len(pending)
        for key, g in _kinked_derivatives(ev, li, pending, h).items():
            (gw if key[0] == "w" else gb)[key[1]] = g
        grads.append((gw, gb))
    return grads, n_kinked


def relative_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def loss_by_full_forward(params, patches, labels):
    """Mean centre-pixel cross-entropy through the plain valid-mode forward."""
    from seedgrow.net.model import forward_logits
    logits = forward_logits(params, patches)
    cy, cx = logits.shape[1] // 2, logits.shape[2] // 2
    return float(_ce(logits[:, cy, cx, :].astype(np.float64), np.asarray(labels)).mean())


def brute_force_sq_edt(mask, spacing=(1.0, 1.0, 1.0)):
    """All-pairs squared distance from every set voxel to the nearest unset
    voxel (0 for unset voxels)."""
    mask = np.asarray(mask).astype(bool)
    out = np.zeros(mask.shape, np.float64)
    bg = np.argwhere(~mask).astype(np.float64) * np.asarray(spacing)
    fg_idx = np.argwhere(mask)
    if len(bg) == 0:
        out[mask] = np.inf
        return out
    fg = fg_idx.astype(np.float64) * np.asarray(spacing)
    for start in range(0, len(fg), 512):
        part = fg[start:start + 512]
        d2 = ((part[:, None, :] - bg[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        idx = fg_idx[start:start + 512]
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = d2
    return out


def linear_quantile(values, q):
    """Hand-rolled linear-interpolation quantile (rank q*(n-1))."""
    v = sorted(values)
    r = q * (len(v) - 1)
    lo = int(r)
    if lo >= len(v) - 1:
        return float(v[-1])
    return float(v[lo] + (r - lo) * (v[lo + 1] - v[lo]))


def naive_forward_logits(params, image):
    """Valid-mode logits of one (H, W, C) image by explicit tap sums in
    float64, without im2col or GEMM reshaping."""
    x = np.asarray(image, np.float64)
    n = len(params.weights)
    for i, (layer, (w, b)) in enumerate(zip(params.arch.layers, params.weights)):
        w = np.asarray(w, np.float64)
        k, d = layer.kernel, layer.dilation
        ho, wo = x.shape[0] - d * (k - 1), x.shape[1] - d * (k - 1)
        out = np.broadcast_to(np.asarray(b, np.float64), (ho, wo, w.shape[0])).copy()
        for a in range(k):
            for c in range(k):
                out += x[a * d:a * d + ho, c * d:c * d + wo, :] @ w[:, :, a, c].T
        x = np.maximum(out, 0) if i < n - 1 else out
    return x


def naive_posterior(params, patch):
    """Tumor posterior of the centre voxel of a receptive-field patch."""
    z = naive_forward_logits(params, patch)[0, 0]
    e = np.exp(z - z.max())
    return e[1] / e.sum()


def padded_brute_force_sq_edt(mask, spacing=(1.0, 1.0, 1.0)):
    """Brute-force squared EDT where space beyond the grid counts as unset."""
    padded = np.pad(np.asarray(mask).astype(bool), 1)
    return brute_force_sq_edt(padded, spacing)[1:-1, 1:-1, 1:-1]


def ball(shape, center, radius, spacing=(1.0, 1.0, 1.0)):
    g = np.indices(shape).astype(float)
    d2 = sum(((g[i] - center[i]) * spacing[i]) ** 2 for i in range(3))
    return d2 <= radius ** 2
