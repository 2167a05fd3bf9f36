"""Checkpoint files: ``model.json`` manifest + ``weights.raw`` payload.

The payload is little-endian float32, layers in order, each layer's kernel
(out, in, kh, kw in C order) followed by its bias.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .arch import Architecture, param_count
from .model import NetworkParams


def save_params(params: NetworkParams, directory, **meta) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = b"".join(np.asarray(a, "<f4").tobytes(order="C") for wb in params.weights for a in wb)
    (directory / "weights.raw").write_bytes(payload)
    manifest = {
        "format": "seedgrow-checkpoint",
        "version": 1,
        "architecture": params.arch.to_dict(),
        "param_count": param_count(params.arch),
        "dtype": "f32",
        "endianness": "little",
        "layout": "per layer: kernel (out, in, kh, kw) then bias (out)",
        "weights": "weights.raw",
        "init_seed": params.seed,
        **params.extra,
        **meta,
    }
    path = directory / "model.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_params(directory) -> NetworkParams:
    directory = Path(directory)
    if directory.name == "model.json":
        directory = directory.parent
    manifest = json.loads((directory / "model.json").read_text())
    arch = Architecture.from_dict(manifest["architecture"])
    raw = np.frombuffer((directory / manifest.get("weights", "weights.raw")).read_bytes(), "<f4")
    if raw.size != param_count(arch):
        raise ValueError(f"checkpoint holds {raw.size} values, architecture needs {param_count(arch)}")
    weights, pos = [], 0
    for layer in arch.layers:
        shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        n = int(np.prod(shape))
        w = raw[pos:pos + n].reshape(shape).astype(np.float32)
        pos += n
        b = raw[pos:pos + layer.out_ch].astype(np.float32)
        pos += layer.out_ch
        weights.append((w, b))
    if not all(np.isfinite(a).all() for wb in weights for a in wb):
        raise ValueError("checkpoint contains non-finite weights")
    extra = {k: manifest[k] for k in ("iteration", "val_loss") if k in manifest}
    return NetworkParams(arch, weights, int(manifest.get("init_seed", 0)), extra)
