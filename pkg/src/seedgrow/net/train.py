"""Balanced patch sampling, Adam training and checkpoint selection."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DEFAULT_ARCH, NetworkParams, center_logits, init_params, loss_and_grad
from .arch import Architecture, receptive_field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 25
    patch_size: int = 99
    total_iterations: int = 4000
    checkpoint_every: int | None = None  # default: total_iterations // 20
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_val_patches: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.minibatch_size < 2:
            raise ValueError("minibatch_size must be >= 2")
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")

    @property
    def every(self) -> int:
        return self.checkpoint_every or max(1, self.total_iterations // 20)

    @property
    def selection_window(self) -> tuple:
        return (self.total_iterations / 2, self.total_iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LabeledStack:
    """Network input channels of one case with its voxel labels."""

    channels: np.ndarray  # (nz, ny, nx, C) float32
    tumor: np.ndarray     # (nz, ny, nx) bool
    breast: np.ndarray    # (nz, ny, nx) bool
    case_id: str = ""


class PatchSampler:
    """Draws class-balanced 2D patches centred on tumor / non-tumor breast
    voxels pooled over all cases."""

    def __init__(self, stacks, patch_size: int = 99):
        self.patch_size = patch_size
        self.half = patch_size // 2
        self.padded = []
        pos, neg = [], []
        for ci, s in enumerate(stacks):
            tumor = np.asarray(s.tumor, bool)
            breast = np.asarray(s.breast, bool)
            p = np.flatnonzero(tumor)
            n = np.flatnonzero(breast & ~tumor)
            if p.size == 0 or n.size == 0:
                raise ValueError(f"case {s.case_id or ci} has no tumor or no non-tumor breast voxels")
            pos.append(np.stack([np.full(p.size, ci), p], 1))
            neg.append(np.stack([np.full(n.size, ci), n], 1))
            self.padded.append(_pad_yx(np.asarray(s.channels, np.float32), self.half))
        self.shapes = [s.tumor.shape for s in stacks]
        self.pos = np.concatenate(pos)
        self.neg = np.concatenate(neg)

    def patch(self, case: int, z: int, y: int, x: int) -> np.ndarray:
        return self.padded[case][z, y:y + self.patch_size, x:x + self.patch_size]

    def draw(self, rng, n_pos: int, n_neg: int):
        picks = [(self.pos[rng.integers(len(self.pos), size=n_pos)], 1),
                 (self.neg[rng.integers(len(self.neg), size=n_neg)], 0)]
        patches, labels, centers = [], [], []
        for rows, label in picks:
            for ci, flat in rows:
                z, y, x = np.unravel_index(flat, self.shapes[ci])
                patches.append(self.patch(ci, z, y, x))
                labels.append(label)
                centers.append((int(ci), int(z), int(y), int(x)))
        return np.stack(patches), np.asarray(labels, np.int64), centers


def _pad_yx(channels, pad):
    from .model import reflect_pad
    return np.ascontiguousarray(reflect_pad(channels, pad))


def sample_minibatch(sampler: PatchSampler, rng, iteration: int = 0, size: int = 25):
    """``size`` patches, half centred on tumor voxels; with an odd size the
    extra patch alternates between classes (13 tumor on even iterations)."""
    n_pos = size // 2 + (size % 2 if iteration % 2 == 0 else 0)
    return sampler.draw(rng, n_pos, size - n_pos)


@dataclass
class TrainedModel:
    params: NetworkParams
    init_seed: int
    checkpoints: list = field(default_factory=list)  # [(iteration, val_loss)]
    selected_iteration: int = 0
    train_losses: list = field(default_factory=list)
    seconds: float = 0.0


class Adam:
    def __init__(self, params: NetworkParams, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.weights]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.weights]
        self.t = 0

    def step(self, params: NetworkParams, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (p_pair, g_pair, m_pair, v_pair) in zip(params.weights, grads, self.m, self.v):
            for p, g, m, v in zip(p_pair, g_pair, m_pair, v_pair):
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def validation_loss(params: NetworkParams, patches, labels, batch: int = 50) -> float:
    total = 0.0
    for s in range(0, len(labels), batch):
        z = center_logits(params, patches[s:s + batch]).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        total += float((lse - z[np.arange(len(z)), labels[s:s + batch]]).sum())
    return total / len(labels)


def train(train_stacks, val_stacks, cfg: TrainConfig, init_seed: int,
          arch: Architecture = DEFAULT_ARCH, progress=None) -> TrainedModel:
    """Train one network and return the checkpoint with the lowest
    validation loss inside the second half of training."""
    if cfg.patch_size < receptive_field(arch):
        raise ValueError("patch_size must be at least the receptive field")
    started = time.perf_counter()
    params = init_params(arch, init_seed)
    train_sampler = PatchSampler(train_stacks, cfg.patch_size)
    val_sampler = PatchSampler(val_stacks, cfg.patch_size)
    rng = np.random.default_rng([cfg.seed, init_seed, 1])
    val_rng = np.random.default_rng([cfg.seed, 2])
    n_val_pos = cfg.n_val_patches // 2
    val_patches, val_labels, _ = val_sampler.draw(val_rng, n_val_pos, cfg.n_val_patches - n_val_pos)

    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    lo, hi = cfg.selection_window
    best = None
    result = TrainedModel(params, init_seed)
    for it in range(1, cfg.total_iterations + 1):
        patches, labels, _ = sample_minibatch(train_sampler, rng, it - 1, cfg.minibatch_size)
        loss, grads = loss_and_grad(params, patches, labels)
        opt.step(params, grads)
        result.train_losses.append(loss)
        if it % cfg.every == 0 or it == cfg.total_iterations:
            vl = validation_loss(params, val_patches, val_labels)
            result.checkpoints.append((it, vl))
            if lo <= it <= hi and (best is None or vl < best[1]):
                best = (it, vl, params.copy())
            log.info("seed %d iter %d train %.4f val %.4f", init_seed, it, loss, vl)
            if progress:
                progress(it, loss, vl)
    result.selected_iteration = best[0]
    result.params = best[2]
    result.params.extra = {"iteration": best[0], "val_loss": best[1]}
    result.seconds = time.perf_counter() - started
    return result
