"""End-to-end orchestration: phantom cohort, ensemble training, FROC and
response monitoring.  Used by the command line and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import DceCase
from .detect import EnsembleModel, member_posteriors, seeds_from_posteriors
from .evaluate import (CaseResponse, case_response, cube_law_change, froc_from_posteriors,
                       response_report)
from .grow import GrowConfig
from .net import LabeledStack, TrainConfig, TrainedModel, save_params, train
from .phantom import PhantomConfig, generate_case, simulate_nac
from .preprocess import build_channels

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def case_stack(case: DceCase, bias_correction: bool = True) -> LabeledStack:
    if case.gt_tumor is None:
        raise ValueError(f"case {case.case_id} has no tumor ground truth")
    return LabeledStack(build_channels(case, bias_correction).array(),
                        np.asarray(case.gt_tumor.data) > 0,
                        np.asarray(case.breast_mask.data) > 0, case.case_id)


def split_counts(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple:
    """Case counts for a train/val/test split; rounding leftovers go to train."""
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if n_train < 1 or n_val < 1:
        raise ValueError(f"cannot split {n} cases into train/val/test {fractions}")
    return n_train, n_val, n_test


def _train_member(args):
    train_stacks, val_stacks, cfg, seed = args
    from threadpoolctl import threadpool_limits
    with threadpool_limits(1):
        return train(train_stacks, val_stacks, cfg, seed)


_SHARED: dict = {}


def _train_member_shared(seed):
    return _train_member((_SHARED["train"], _SHARED["val"], _SHARED["cfg"], seed))


def train_ensemble(train_stacks, val_stacks, cfg: TrainConfig, init_seeds, threads: int = 1) -> list:
    """Train one member per init seed.  Each member uses single-threaded
    BLAS, so results do not depend on ``threads``; with ``threads`` > 1
    members train in parallel worker processes."""
    init_seeds = list(init_seeds)
    workers = min(threads, len(init_seeds))
    if workers <= 1:
        return [_train_member((train_stacks, val_stacks, cfg, s)) for s in init_seeds]
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor
    _SHARED.update(train=train_stacks, val=val_stacks, cfg=cfg)
    try:
        with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
            return list(pool.map(_train_member_shared, init_seeds))
    finally:
        _SHARED.clear()


@dataclass(frozen=True)
class RunConfig:
    """Configuration of the end-to-end pipeline."""

    phantom: PhantomConfig = PhantomConfig()
    n_cases: int = 30
    split: tuple = (20, 5, 5)
    train: TrainConfig = TrainConfig()
    init_seeds: tuple = (1, 2, 3)
    tau: float = 0.9
    vote: str = "majority"
    min_separation_mm: float = 5.0
    grow: GrowConfig = GrowConfig()
    froc_taus: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
    hit_distance_mm: float | None = None
    n_response_pairs: int = 5
    shrink_range: tuple = (0.55, 0.85)
    seed: int = 0

    def __post_init__(self):
        if sum(self.split) != self.n_cases or min(self.split) < 1:
            raise ConfigError(f"split {list(self.split)} must be positive and sum to n_cases={self.n_cases}")
        if self.n_response_pairs > self.split[2]:
            raise ConfigError("n_response_pairs cannot exceed the number of test cases")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must be in (0, 1)")
        if self.vote not in ("majority", "unanimity"):
            raise ConfigError(f"unknown vote rule {self.vote!r}")
        lo, hi = self.shrink_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("shrink_range must lie in (0, 1]")
        if not self.init_seeds:
            raise ConfigError("init_seeds must not be empty")

    @property
    def taus(self) -> list:
        return sorted({*map(float, self.froc_taus), float(self.tau)}, reverse=True)

    def to_dict(self) -> dict:
        return {
            "config_version": CONFIG_VERSION,
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "cohort": {"n_cases": self.n_cases, "split": list(self.split)},
            "train": self.train.to_dict(),
            "ensemble": {"init_seeds": list(self.init_seeds), "tau": self.tau, "vote": self.vote},
            "detect": {"min_separation_mm": self.min_separation_mm},
            "grow": self.grow.to_dict(),
            "froc": {"taus": list(self.froc_taus), "hit_distance_mm": self.hit_distance_mm},
            "response": {"n_pairs": self.n_response_pairs, "shrink_range": list(self.shrink_range)},
        }

    @classmethod
    def from_dict(cls, d: dict, seed_override: int | None = None) -> "RunConfig":
        d = dict(d)
        version = d.pop("config_version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version!r}")
        known = {"seed", "phantom", "cohort", "train", "ensemble", "detect", "grow", "froc", "response"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = int(d.get("seed", 0)) if seed_override is None else int(seed_override)
        try:
            phantom = PhantomConfig.from_dict({**d.get("phantom", {}), "rng_seed": seed})
            train_cfg = TrainConfig.from_dict({**d.get("train", {}), "seed": seed})
            grow_cfg = GrowConfig.from_dict(d.get("grow", {}))
            kw = {}
            sections = {"cohort": ("n_cases", "split"),
                        "ensemble": ("init_seeds", "tau", "vote"),
                        "detect": ("min_separation_mm",),
                        "froc": ("taus", "hit_distance_mm"),
                        "response": ("n_pairs", "shrink_range")}
            rename = {"taus": "froc_taus", "n_pairs": "n_response_pairs"}
            for sec, keys in sections.items():
                sub = d.get(sec, {})
                bad = set(sub) - set(keys)
                if bad:
                    raise ConfigError(f"unknown keys in {sec}: {sorted(bad)}")
                for k in keys:
                    if k in sub:
                        v = sub[k]
                        kw[rename.get(k, k)] = tuple(v) if isinstance(v, list) else v
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
        return cls(phantom=phantom, train=train_cfg, grow=grow_cfg, seed=seed, **kw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def versions() -> dict:
    import numba
    import scipy
    import skimage
    return {"seedgrow": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "scikit-image": skimage.__version__}


def write_manifest(out_dir, command: str, config_hash: str | None = None, seeds: dict | None = None,
                   extra: dict | None = None) -> Path:
    """Machine-readable record of what produced the outputs in ``out_dir``.
    It holds no timestamps or paths, so reruns produce identical bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config_version": CONFIG_VERSION, "config_hash": config_hash,
                "seeds": seeds or {}, "versions": versions()}
    if extra:
        manifest.update(extra)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class PipelineResult:
    summary: dict
    models: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, out_dir, threads: int = 1) -> PipelineResult:
    """Phantom cohort -> ensemble training -> FROC on the test split ->
    response monitoring on simulated treatment pairs of the test cases."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    n_train, n_val, n_test = cfg.split
    t0 = time.perf_counter()
    stacks = [case_stack(generate_case(cfg.phantom, i)) for i in range(n_train + n_val)]
    train_stacks, val_stacks = stacks[:n_train], stacks[n_train:]
    timings["phantoms_s"] = time.perf_counter() - t0
    log.info("generated %d training/validation phantoms in %.1f s", len(stacks), timings["phantoms_s"])

    t0 = time.perf_counter()
    members: list[TrainedModel] = train_ensemble(train_stacks, val_stacks, cfg.train, cfg.init_seeds, threads)
    timings["train_s"] = time.perf_counter() - t0
    timings["member_train_s"] = [m.seconds for m in members]
    del stacks, train_stacks, val_stacks
    for m in members:
        save_params(m.params, out_dir / "models" / f"member_{m.init_seed}", init_seed=m.init_seed,
                    iteration=m.selected_iteration, val_loss=m.params.extra["val_loss"])
        dump_json({"init_seed": m.init_seed, "selected_iteration": m.selected_iteration,
                   "checkpoints": [[it, vl] for it, vl in m.checkpoints]},
                  out_dir / "models" / f"member_{m.init_seed}" / "training.json")
    model = EnsembleModel([m.params for m in members], cfg.tau, cfg.vote)

    t0 = time.perf_counter()
    test_ids = list(range(n_train + n_val, cfg.n_cases))
    test_posts, gts, channels = [], [], {}
    for i in test_ids:
        case = generate_case(cfg.phantom, i)
        ch = build_channels(case)
        channels[i] = ch
        test_posts.append(member_posteriors(model, ch.array(), case.breast_mask, threads))
        gts.append(case.gt_tumor)
    curve = froc_from_posteriors(test_posts, gts, cfg.taus, cfg.vote, cfg.min_separation_mm,
                                 cfg.hit_distance_mm)
    timings["froc_s"] = time.perf_counter() - t0
    (out_dir / "froc.csv").write_text(curve.to_csv())

    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 3])
    shrinks = rng.uniform(*cfg.shrink_range, size=cfg.n_response_pairs)
    responses: list[CaseResponse] = []
    for k, (i, shrink) in enumerate(zip(test_ids, shrinks)):
        pre = generate_case(cfg.phantom, i)
        during = simulate_nac(pre, float(shrink))
        ch_pre = channels[i]
        ch_dur = build_channels(during)
        pre_seeds = seeds_from_posteriors(test_posts[k], cfg.tau, cfg.vote, cfg.min_separation_mm).seeds
        dur_posts = member_posteriors(model, ch_dur.array(), during.breast_mask, threads)
        dur_seeds = seeds_from_posteriors(dur_posts, cfg.tau, cfg.vote, cfg.min_separation_mm).seeds
        r = case_response(pre_seeds, dur_seeds, ch_pre.washin, pre.breast_mask, ch_dur.washin,
                          during.breast_mask, cfg.grow, pre.case_id, gt_tumor=pre.gt_tumor,
                          reference_change=cube_law_change(float(shrink)))
        responses.append(r)
        log.info("%s shrink %.4f: recovered %s, reference %.2f", pre.case_id, shrink,
                 r.percent_change, r.reference_change)
    report = response_report(responses)
    timings["respond_s"] = time.perf_counter() - t0
    report_dict = report.to_dict()
    dump_json(report_dict, out_dir / "report.json")

    point = curve.at(cfg.tau)
    summary = {
        "config_version": CONFIG_VERSION,
        "config_hash": cfg.digest(),
        "detection": {"tau": cfg.tau, "vote": cfg.vote, "sensitivity": point.sensitivity,
                      "fp_per_case": point.fp_per_case, "hits": point.hits,
                      "false_positives": point.false_positives, "n_cases": curve.n_cases,
                      "n_tumors": curve.n_tumors, "froc": curve.to_dict()["points"]},
        "training": [{"init_seed": m.init_seed, "selected_iteration": m.selected_iteration,
                      "val_loss": m.params.extra["val_loss"],
                      "initial_train_loss": m.train_losses[0], "final_train_loss": m.train_losses[-1]}
                     for m in members],
        "response": {
            "cases": [{"case_id": r.case_id, "shrink_factor": float(s),
                       "reference_change": r.reference_change, "percent_change": r.percent_change,
                       "error_pp": None if r.percent_change is None
                       else r.percent_change - r.reference_change}
                      for r, s in zip(responses, shrinks)],
            "cohort": report_dict["cohort"],
            "reference_cohort": report_dict.get("reference", {}).get("cohort"),
            "max_abs_error_pp": report_dict.get("reference", {}).get("max_abs_error_pp"),
            "warnings": report_dict["warnings"],
        },
    }
    dump_json(summary, out_dir / "summary.json")
    seeds = {"global": cfg.seed, "init_seeds": list(cfg.init_seeds)}
    write_manifest(out_dir, "pipeline", cfg.digest(), seeds)
    for k, v in timings.items():
        log.info("timing %s: %s", k, v)
    return PipelineResult(summary, members, timings)


def env_seed() -> int | None:
    v = os.environ.get("SEEDGROW_SEED")
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"SEEDGROW_SEED must be an integer, got {v!r}") from None
