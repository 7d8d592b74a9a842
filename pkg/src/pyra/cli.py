"""Command-line entry point: ``pyra {schedule,flops,train,eval,bench}``.

Machine-readable output goes to stdout (JSON, or CSV with ``--csv``);
diagnostics go to stderr. Exit codes: 0 ok, 2 bad input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .arch import ArchSpec
from .checkpoint import CheckpointFormatError, load_model, save_model
from .config import RunConfig, RunConfigError
from .merge import ScheduleError
from .schedule import (
    MERGE_POINTS,
    PUBLISHED,
    FlopsReport,
    MergeSchedule,
    ScheduleSpec,
    constant_schedule,
    decreasing_schedule,
    published_schedule,
    validate_schedule,
    vit_flops,
)
from .train import TrainingDivergedError, evaluate, train

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("PYRA_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"PYRA_SEED must be an integer, got {raw!r}") from None


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p.read_text()


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")


def _load_schedule(arg: str, arch: ArchSpec) -> MergeSchedule:
    """A published name, a JSON literal, or a path to a JSON file."""
    if arg in PUBLISHED:
        return published_schedule(arg)
    if arg.lstrip().startswith("["):
        return MergeSchedule.from_json(arg)
    return MergeSchedule.from_json(_read_text(arg))


# --------------------------------------------------------------------------- commands


def cmd_schedule(args) -> int:
    if args.from_json:
        sched = MergeSchedule.from_json(_read_text(args.from_json))
        if args.arch:
            validate_schedule(sched, ArchSpec.preset(args.arch))
        _emit(list(sched.r))
        return EXIT_OK
    if args.published:
        _emit(list(published_schedule(args.published).r))
        return EXIT_OK
    if not args.arch:
        raise InputError("--arch is required with --ratio or --constant")
    arch = ArchSpec.preset(args.arch)
    if args.constant is not None:
        sched = constant_schedule(arch, args.constant)
    elif args.ratio is not None:
        sched = decreasing_schedule(arch, ScheduleSpec(args.ratio, args.final_tokens))
        validate_schedule(sched, arch)
    else:
        raise InputError("give one of --ratio, --constant, --published or --from-json")
    _emit(list(sched.r))
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.from_json:
        try:
            report = FlopsReport.from_dict(json.loads(_read_text(args.from_json)))
        except (KeyError, TypeError, json.JSONDecodeError) as err:
            raise InputError(f"not a FLOP report: {err}") from None
    else:
        arch = ArchSpec.preset(args.arch)
        sched = _load_schedule(args.schedule, arch) if args.schedule else MergeSchedule.identity(arch.L)
        report = vit_flops(
            arch,
            sched,
            include_pyra=args.pyra == "on",
            count_patch_embed=not args.no_patch_embed,
            count_head=not args.no_head,
            merge_point=args.merge_point,
        )
    if args.csv:
        sys.stdout.write(report.to_csv())
    else:
        sys.stdout.write(report.to_json(indent=None) + "\n")
    for note in report.notes:
        if note.startswith("layer ") and note[6:7].isdigit():
            print(f"note: {note}", file=sys.stderr)
    return EXIT_OK


def _run_config(path: str, seed_override: int | None) -> RunConfig:
    cfg = RunConfig.from_json(_read_text(path)) if path else RunConfig(seed=default_seed())
    if seed_override is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed_override})
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    state = cfg.build_model()
    metrics = (out / "metrics.jsonl").open("w")

    def log(rec):
        metrics.write(json.dumps(rec) + "\n")
        metrics.flush()
        if not args.quiet:
            print(json.dumps(rec), file=sys.stderr)

    try:
        result = train(state, cfg.task(), cfg.train_config(), log=log)
    except TrainingDivergedError as err:
        params = state.trainable_parameters()
        for k, v in err.last_good.items():
            params[k].data = v
        save_model(out / "last_good.pyra", state, cfg)
        print(f"error: training diverged: {err}; last good state in {out / 'last_good.pyra'}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        metrics.close()
    save_model(out / "checkpoint.pyra", state, cfg)
    summary = {
        "checkpoint": str(out / "checkpoint.pyra"),
        "metrics": str(out / "metrics.jsonl"),
        "best_epoch": result.best_epoch,
        "best_val_acc": result.best_val_acc,
        "initial_loss": result.initial_loss,
        "final_train_loss": result.history[-1]["train_loss"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _emit(summary)
    return EXIT_OK


def _load(path: str):
    if not Path(path).is_file():
        raise InputError(f"no such checkpoint: {path}")
    return load_model(path)


def cmd_eval(args) -> int:
    state, cfg = _load(args.checkpoint)
    split = cfg.task().split(args.split)
    acc, loss = evaluate(state, split, cfg.eval_batch_size)
    _emit({"split": args.split, "n": len(split), "accuracy": acc, "loss": loss})
    return EXIT_OK


def bench_model(state, images: np.ndarray, repeat: int, warmup: int = 1) -> dict:
    from .vit import forward

    for _ in range(warmup):
        forward(images, state)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        forward(images, state)
        times.append(time.perf_counter() - t0)
    ips = images.shape[0] / np.asarray(times)
    q1, med, q3 = np.percentile(ips, [25, 50, 75])
    return {
        "images": int(images.shape[0]),
        "repeat": repeat,
        "median_images_per_s": float(med),
        "iqr_images_per_s": float(q3 - q1),
        "median_seconds": float(np.median(times)),
        "min_seconds": float(np.min(times)),
    }


def cmd_bench(args) -> int:
    if args.repeat < 1 or args.images < 1:
        raise InputError("--images and --repeat must be positive")
    if args.checkpoint:
        state, cfg = _load(args.checkpoint)
    else:
        seed = args.seed if args.seed is not None else default_seed()
        base = {"arch": args.arch, "seed": seed, "lora_rank": 0, "pyra": args.pyra == "on"}
        if args.schedule:
            base["schedule"] = list(_load_schedule(args.schedule, ArchSpec.preset(args.arch)).r)
        cfg = RunConfig.from_dict(base)
        state = cfg.build_model()
    arch = cfg.arch_spec()
    rng = np.random.default_rng(cfg.seed)
    images = rng.normal(size=(args.images, arch.channels, arch.img, arch.img))
    report = bench_model(state, images, args.repeat, args.warmup)
    report["schedule"] = list(cfg.schedule)
    _emit(report)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pyra", description="Token merging with modulated merge sources for ViTs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("schedule", help="solve or print a merge schedule")
    s.add_argument("--arch", help="architecture preset (vit_b, vit_l, deit_b, tiny)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--ratio", type=float, help="target FLOP ratio F/f for the decreasing schedule")
    g.add_argument("--constant", type=int, help="merge this many pairs in every layer")
    g.add_argument("--published", choices=sorted(PUBLISHED))
    g.add_argument("--from-json", help="read a schedule (or FLOP report) JSON file, '-' for stdin")
    s.add_argument("--final-tokens", type=int, default=4)
    s.set_defaults(func=cmd_schedule)

    f = sub.add_parser("flops", help="per-layer MAC report")
    f.add_argument("--arch", default="vit_b")
    f.add_argument("--schedule", help="published name, JSON array, or JSON file")
    f.add_argument("--pyra", choices=("on", "off"), default="off")
    f.add_argument("--merge-point", choices=MERGE_POINTS, default="block_input")
    f.add_argument("--no-patch-embed", action="store_true")
    f.add_argument("--no-head", action="store_true")
    f.add_argument("--csv", action="store_true", help="emit per-layer CSV instead of JSON")
    f.add_argument("--from-json", help="re-emit a saved FLOP report")
    f.set_defaults(func=cmd_flops)

    t = sub.add_parser("train", help="train on the synthetic task")
    t.add_argument("--config", help="run config JSON (defaults to the tiny recipe)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="host inference throughput")
    b.add_argument("--checkpoint")
    b.add_argument("--arch", default="tiny")
    b.add_argument("--schedule")
    b.add_argument("--pyra", choices=("on", "off"), default="on")
    b.add_argument("--images", type=int, default=64)
    b.add_argument("--repeat", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (InputError, ScheduleError, RunConfigError, CheckpointFormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
