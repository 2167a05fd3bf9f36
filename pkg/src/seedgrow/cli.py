"""Command-line interface.

Exit status: 0 on success, 1 on invalid usage or input, 2 on a runtime
failure.  Every command writes ``run_manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .core import VolumeFormatError, write_volume
from .workflow import ConfigError, RunConfig, dump_json, env_seed, write_manifest

log = logging.getLogger("seedgrow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None


def _seed(config_seed: int) -> int:
    s = env_seed()
    return config_seed if s is None else s


def _load_models(paths):
    from .net import load_params
    models = []
    for p in paths:
        if not (Path(p) / "model.json").is_file() and not str(p).endswith("model.json"):
            raise UsageError(f"not a model directory: {p}")
        models.append(load_params(p))
    return models


def _ensemble(args):
    from .detect import EnsembleModel
    try:
        return EnsembleModel(_load_models(args.models), args.tau, args.vote)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_case(path):
    from .phantom import load_case
    if not Path(path).exists():
        raise UsageError(f"case not found: {path}")
    return load_case(path)


def _case_dirs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    dirs = sorted(p.parent for p in root.glob("*/case.json"))
    if not dirs:
        raise UsageError(f"no case directories (*/case.json) under {root}")
    return dirs


def cmd_phantom(args):
    from .phantom import PhantomConfig, generate_case, save_case, simulate_nac
    d = _read_json(args.config) if args.config else {}
    d = {**d, "rng_seed": _seed(int(d.get("rng_seed", 0)))}
    try:
        cfg = PhantomConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    out = Path(args.out)
    written = []
    for i in range(args.start, args.start + args.cases):
        case = generate_case(cfg, i)
        save_case(case, out / case.case_id)
        entry = {"case_id": case.case_id, "manifest": f"{case.case_id}/case.json",
                 "gt_tumor_volumes_mm3": {str(k): v for k, v in case.gt_tumor_volumes.items()}}
        if args.shrink is not None:
            nac = simulate_nac(case, args.shrink)
            save_case(nac, out / nac.case_id)
            entry["nac"] = {"case_id": nac.case_id, "manifest": f"{nac.case_id}/case.json",
                            "shrink_factor": args.shrink}
        written.append(entry)
    dump_json({"config": cfg.to_dict(), "cases": written}, out / "phantoms.json")
    write_manifest(out, "phantom", seeds={"global": cfg.rng_seed})


def cmd_preprocess(args):
    from .preprocess import build_channels
    case = _load_case(args.case)
    ch = build_channels(case, bias_correction=not args.no_bias_correction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("pre", "washin", "washout"):
        write_volume(getattr(ch, name), out / name)
    dump_json({"case_id": case.case_id, "channels": ["pre", "washin", "washout"]}, out / "channels.json")
    write_manifest(out, "preprocess")


def cmd_train(args):
    from .net import TrainConfig, save_params
    from .phantom import load_case
    from .workflow import case_stack, split_counts, train_ensemble
    d = _read_json(args.config) if args.config else {}
    d = {**d, "seed": _seed(int(d.get("seed", 0)))}
    try:
        cfg = TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    dirs = _case_dirs(args.data)
    try:
        n_train, n_val, _ = split_counts(len(dirs))
    except ValueError as e:
        raise UsageError(str(e)) from None
    stacks = [case_stack(load_case(p)) for p in dirs[:n_train + n_val]]
    model = train_ensemble(stacks[:n_train], stacks[n_train:], cfg, [args.seed], args.threads)[0]
    out = Path(args.out)
    save_params(model.params, out, init_seed=args.seed, iteration=model.selected_iteration,
                val_loss=model.params.extra["val_loss"])
    dump_json({"init_seed": args.seed, "selected_iteration": model.selected_iteration,
               "checkpoints": [[it, vl] for it, vl in model.checkpoints],
               "train_cases": [p.name for p in dirs[:n_train]],
               "val_cases": [p.name for p in dirs[n_train:n_train + n_val]]}, out / "training.json")
    write_manifest(out, "train", seeds={"global": cfg.seed, "init": args.seed},
                   extra={"train_config": cfg.to_dict()})


def cmd_detect(args):
    from .detect import generate_seeds, seeds_to_json
    from .preprocess import build_channels
    model = _ensemble(args)
    case = _load_case(args.case)
    res = generate_seeds(model, build_channels(case).array(), case.breast_mask,
                         args.min_separation_mm, args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json({"case_id": case.case_id, "tau": args.tau, "vote": args.vote,
               "seeds": seeds_to_json(res.seeds)}, out)
    write_manifest(out.parent, "detect", extra={"n_members": len(model.members)})


def cmd_grow(args):
    from .detect import SeedPoint
    from .grow import GrowConfig, grow
    from .preprocess import build_channels
    case = _load_case(args.case)
    seeds_doc = _read_json(args.seeds)
    try:
        cfg = GrowConfig.from_dict(_read_json(args.config)) if args.config else GrowConfig()
        seeds = [SeedPoint.from_dict(s) for s in seeds_doc.get("seeds", [])]
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"invalid grow input: {e}") from None
    washin = build_channels(case).washin
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(seeds):
        seg = grow(washin, case.breast_mask, s, cfg)
        name = f"seg_{i:03d}"
        write_volume(seg.mask, out / name)
        records.append({"mask": name, **seg.summary()})
    dump_json({"case_id": case.case_id, "config": cfg.to_dict(), "segmentations": records},
              out / "segmentation.json")
    write_manifest(out, "grow")


def _parse_taus(text) -> list:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"invalid --taus {text!r}") from None
    if not taus or any(not 0 < t < 1 for t in taus):
        raise UsageError("--taus must be values in (0, 1)")
    return taus


def cmd_froc(args):
    from .evaluate import froc
    from .preprocess import build_channels
    taus = _parse_taus(args.taus)
    model = _ensemble(args)

    def cases():
        for p in _case_dirs(args.cases):
            case = _load_case(p)
            if case.gt_tumor is None:
                raise UsageError(f"{p}: case has no tumor ground truth")
            yield build_channels(case).array(), case.breast_mask, case.gt_tumor

    curve = froc(model, cases(), taus, args.min_separation_mm, args.hit_distance_mm, args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(curve.to_csv())
    write_manifest(out.parent, "froc", extra={"n_cases": curve.n_cases, "n_tumors": curve.n_tumors})


def cmd_respond(args):
    from .detect import generate_seeds
    from .evaluate import case_response, response_report
    from .grow import GrowConfig
    from .preprocess import build_channels
    model = _ensemble(args)
    try:
        cfg = GrowConfig.from_dict(_read_json(args.grow_config)) if args.grow_config else GrowConfig()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    pre, during = _load_case(args.pre), _load_case(args.during)
    if not pre.pre.same_geometry(during.pre):
        raise UsageError("pre and during cases must share one voxel grid")
    ch_pre, ch_dur = build_channels(pre), build_channels(during)
    s_pre = generate_seeds(model, ch_pre.array(), pre.breast_mask, args.min_separation_mm, args.threads)
    s_dur = generate_seeds(model, ch_dur.array(), during.breast_mask, args.min_separation_mm, args.threads)
    ref = None
    if pre.gt_tumor_volumes and during.gt_tumor_volumes:
        v0, v1 = sum(pre.gt_tumor_volumes.values()), sum(during.gt_tumor_volumes.values())
        ref = 100.0 * (v1 - v0) / v0 if v0 > 0 else None
    r = case_response(s_pre.seeds, s_dur.seeds, ch_pre.washin, pre.breast_mask, ch_dur.washin,
                      during.breast_mask, cfg, pre.case_id, gt_tumor=pre.gt_tumor, reference_change=ref)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json(response_report([r]).to_dict(), out)
    write_manifest(out.parent, "respond")


def cmd_pipeline(args):
    from .workflow import run_pipeline
    d = _read_json(args.config) if args.config else RunConfig().to_dict()
    try:
        cfg = RunConfig.from_dict(d, env_seed())
    except ConfigError as e:
        raise UsageError(f"invalid config: {e}") from None
    res = run_pipeline(cfg, args.out, args.threads)
    det = res.summary["detection"]
    cohort = res.summary["response"]["cohort"]
    print(f"sensitivity@{det['tau']}: {det['sensitivity']:.3f}  FP/case: {det['fp_per_case']:.2f}")
    if cohort:
        print(f"volume change: {cohort['formatted']}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads/processes (default: all cores)")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="seedgrow", description="Lesion seed detection and volume growing on DCE-MRI.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def ensemble_args(sp):
        sp.add_argument("--models", nargs="+", required=True, help="model directories")
        sp.add_argument("--tau", type=float, default=0.9)
        sp.add_argument("--vote", choices=["majority", "unanimity"], default="majority")
        sp.add_argument("--min-separation-mm", type=float, default=5.0)

    sp = add("phantom", cmd_phantom, "generate synthetic DCE cases")
    sp.add_argument("--config", help="phantom config JSON")
    sp.add_argument("--cases", type=int, required=True)
    sp.add_argument("--start", type=int, default=0, help="index of the first case")
    sp.add_argument("--shrink", type=float, help="also write a treated copy with this shrink factor")
    sp.add_argument("--out", required=True)

    sp = add("preprocess", cmd_preprocess, "write the network input channels of a case")
    sp.add_argument("--case", required=True)
    sp.add_argument("--no-bias-correction", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train one network")
    sp.add_argument("--data", required=True, help="directory of case directories")
    sp.add_argument("--config", help="train config JSON")
    sp.add_argument("--seed", type=int, required=True, help="initialization seed")
    sp.add_argument("--out", required=True)

    sp = add("detect", cmd_detect, "generate seed points for a case")
    sp.add_argument("--case", required=True)
    ensemble_args(sp)
    sp.add_argument("--out", required=True)

    sp = add("grow", cmd_grow, "grow lesions from seed points")
    sp.add_argument("--case", required=True)
    sp.add_argument("--seeds", required=True)
    sp.add_argument("--config", help="grow config JSON")
    sp.add_argument("--out", required=True)

    sp = add("froc", cmd_froc, "FROC analysis over a directory of cases")
    ensemble_args(sp)
    sp.add_argument("--cases", required=True)
    sp.add_argument("--taus", default="0.5,0.6,0.7,0.8,0.9,0.95,0.99")
    sp.add_argument("--hit-distance-mm", type=float, default=None)
    sp.add_argument("--out", required=True)

    sp = add("respond", cmd_respond, "volume change between two time points")
    ensemble_args(sp)
    sp.add_argument("--pre", required=True)
    sp.add_argument("--during", required=True)
    sp.add_argument("--grow-config")
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "phantoms, training, FROC and response end to end")
    sp.add_argument("--config", help="run config JSON (default: desk-scale defaults)")
    sp.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    args.threads = args.threads or os.cpu_count() or 1
    if args.threads < 1:
        sys.stderr.write("--threads must be >= 1\n")
        return 1
    try:
        args.func(args)
    except (UsageError, ConfigError, VolumeFormatError, FileNotFoundError) as e:
        sys.stderr.write(f"seedgrow {args.command}: {e}\n")
        _failure_manifest(args, 1, e)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("%s failed", args.command)
        sys.stderr.write(f"seedgrow {args.command}: runtime failure: {e}\n")
        _failure_manifest(args, 2, e)
        return 2
    return 0


def _failure_manifest(args, status: int, err: Exception) -> None:
    out = Path(args.out)
    target = out if args.command in ("phantom", "preprocess", "train", "grow", "pipeline") else out.parent
    try:
        write_manifest(target, args.command, extra={"exit_status": status, "error": str(err)})
    except OSError:
        pass


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
