"""Command line entry points: gen-data, pretrain, tune, eval, report."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERIC = 4

__version__ = "0.1.0"


class DependencyError(RuntimeError):
    pass


def _apply_threads(serial: bool):
    import torch

    if serial:
        torch.set_num_threads(1)
    else:
        cap = os.environ.get("STFOUNDRY_THREADS")
        if cap:
            torch.set_num_threads(max(1, int(cap)))


def _load_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise DependencyError(f"missing {what}: {path}")
    with open(path) as f:
        return json.load(f)


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   started: float, artifacts: dict):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config_sha256": _config_hash(config),
        "artifacts": artifacts,
        "wall_clock_s": time.time() - started,
    }
    path = out_dir / "run_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def _prepare_out(out_dir: Path, force: bool):
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise SystemExit2(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)


class SystemExit2(Exception):
    """Usage-level error (exit code 2)."""


def cmd_gen_data(args) -> int:
    from . import data as D

    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    raw = _load_json(Path(args.config), "world config") if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    known = {k: v for k, v in raw.items() if k in D.WorldConfig.__dataclass_fields__}
    config = D.WorldConfig(**known)
    world = D.generate_synthetic_world(config)
    D.save_world(world, out)
    write_manifest(out, "gen-data", asdict(config), config.seed, started,
                   {"world_dir": str(out)})
    print(f"generated world with {config.num_segments} segments, "
          f"{len(world.trajectories)} trajectories -> {out}")
    return EXIT_OK


def _load_training(args):
    from . import data as D
    from . import training as T

    raw = _load_json(Path(args.config), "training config")
    world_dir = raw.get("world_dir")
    if not world_dir:
        raise SystemExit2("training config must set 'world_dir'")
    world = D.load_world(Path(world_dir))
    config = T.TrainingConfig.from_dict(raw)
    if args.seed is not None:
        config.seed = args.seed
    config.serial_mode = bool(args.serial)
    return world, config, raw


def cmd_pretrain(args) -> int:
    from . import training as T

    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    world, config, raw = _load_training(args)
    _apply_threads(args.serial)
    result = T.run_mrt_stage(world, config)
    ckpt = out / "stage1.pt"
    T.save_checkpoint(ckpt, result.model, world.config, result.stats, config)
    T.write_trace_csv(out / "mrt_trace.csv", result.trace)
    write_manifest(out, "pretrain", raw, config.seed, started,
                   {"checkpoint": str(ckpt), "trace": str(out / "mrt_trace.csv")})
    print(f"stage-1 done: final loss {result.trace[-1]['total']:.4f}, "
          f"masked segment accuracy {result.final_metrics['masked_segment_accuracy']:.3f}")
    return EXIT_OK


def cmd_tune(args) -> int:
    from . import training as T

    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    world, config, raw = _load_training(args)
    ckpt_in = raw.get("checkpoint")
    if not ckpt_in:
        raise SystemExit2("training config must set 'checkpoint' for tune")
    if not Path(ckpt_in).is_file():
        raise DependencyError(f"missing checkpoint: {ckpt_in}")
    _apply_threads(args.serial)
    model, stats, _ = T.load_checkpoint(ckpt_in)
    if args.task:
        config.task_mix = {args.task: 1.0}
    result = T.run_prompt_tuning(model, world, config, stats)
    ckpt = out / "stage2.pt"
    T.save_checkpoint(ckpt, result.model, world.config, stats, config)
    T.write_trace_csv(out / "tune_trace.csv", result.trace)
    write_manifest(out, "tune", raw, config.seed, started,
                   {"checkpoint": str(ckpt), "trace": str(out / "tune_trace.csv")})
    print(f"stage-2 done over tasks: {', '.join(config.task_mix)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation as E
    from . import data as D
    from . import training as T

    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    raw = _load_json(Path(args.config), "eval config")
    world_dir = raw.get("world_dir")
    ckpt_in = raw.get("checkpoint")
    if not world_dir or not ckpt_in:
        raise SystemExit2("eval config must set 'world_dir' and 'checkpoint'")
    if not Path(ckpt_in).is_file():
        raise DependencyError(f"missing checkpoint: {ckpt_in}")
    world = D.load_world(Path(world_dir))
    _apply_threads(args.serial)
    model, stats, payload = T.load_checkpoint(ckpt_in)
    config = T.TrainingConfig.from_dict(payload.get("training_config", {}))
    seed = args.seed if args.seed is not None else config.seed
    tasks = [args.task] if args.task else list(raw.get(
        "tasks",
        ["next_hop", "classification", "tte", "one_step", "multi_step",
         "imputation", "recovery", "similar_search"],
    ))
    reports = {}
    for task_id in tasks:
        report = E.eval_task(
            task_id, model, world, stats, config,
            split=raw.get("split", "test"),
            recovery_ratio=args.mask_ratio,
            seed=seed,
        )
        path = E.write_report(report, out / "reports")
        reports[task_id] = str(path)
        print(f"{task_id}: " + ", ".join(f"{k}={v:.4f}" for k, v in report.metrics.items()
                                         if isinstance(v, float)))
    write_manifest(out, "eval", raw, seed, started, {"reports": reports})
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    reports_dir = out / "reports"
    if not reports_dir.is_dir():
        raise DependencyError(f"no reports found under {reports_dir}")
    rows = []
    for path in sorted(reports_dir.glob("*.json")):
        payload = json.loads(path.read_text())
        for name, value in sorted(payload["metrics"].items()):
            rows.append((payload["task_id"], name, value))
    for task_id, name, value in rows:
        print(f"{task_id:16s} {name:14s} {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stfoundry",
        description="Synthetic road-network worlds and a multi-task spatiotemporal model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=False, help="path to a JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--serial", action="store_true",
                       help="single-threaded deterministic mode")
        p.add_argument("--force", action="store_true",
                       help="write into a non-empty output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic world")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage-1 masked reconstruction training")
    common(p)
    p.set_defaults(fn=cmd_pretrain, config_required=True)

    p = sub.add_parser("tune", help="stage-2 multi-task prompt tuning")
    common(p)
    p.add_argument("--task", default=None, help="single-task ablation")
    p.set_defaults(fn=cmd_tune, config_required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on downstream tasks")
    common(p)
    p.add_argument("--task", default=None)
    p.add_argument("--mask-ratio", type=float, default=None,
                   help="recovery mask ratio override")
    p.set_defaults(fn=cmd_eval, config_required=True)

    p = sub.add_parser("report", help="print a metric summary from a run directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report, config_required=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if getattr(args, "config_required", False) and not getattr(args, "config", None):
        print("error: --config is required for this command", file=sys.stderr)
        return EXIT_USAGE

    from .training import NumericError

    try:
        return args.fn(args)
    except SystemExit2 as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
