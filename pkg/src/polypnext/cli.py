"""Command line entry point: ``polypnext {synth,train,eval,bench,ablate}``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shlex
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .data import SPLITS, DataError, SynthSpec, filter_split, scan_dataset, select_first_clip_per_polyp, synthesize_dataset
from .model import CheckpointError, ModelConfig, PolypNextLSTM, count_parameters, load_checkpoint
from .training import ConfigError, NonFiniteLossError, TrainConfig, config_from_dict, dump_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_MANIFEST = "run_manifest.json"

log = logging.getLogger("polypnext")


class UsageError(Exception):
    pass


def _source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"git:{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"polypnext {__version__}"


def write_run_manifest(out_dir: Path, argv, config_text: str, seed: int) -> Path:
    from .evaluation import hardware_descriptor

    manifest = {
        "command": shlex.join(["polypnext", *argv]),
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest()[:16],
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "source_revision": _source_revision(),
        "hardware": hardware_descriptor(),
    }
    path = Path(out_dir) / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _parse_value(text: str):
    return yaml.safe_load(text)


def resolve_config(path, overrides, flags=None) -> tuple[ModelConfig, TrainConfig]:
    """Config file values, then ``--set section.key=value`` overrides, then dedicated flags."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        load_config(path)  # validates the file on its own
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][name] = _parse_value(value)
    for (section, name), value in (flags or {}).items():
        if value is not None:
            raw.setdefault(section, {})[name] = value
    return config_from_dict(raw)


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    try:
        spec = SynthSpec(n_clips=args.clips, n_frames=args.frames, size=args.size,
                         eval_clips=args.eval_clips, clips_per_case=args.clips_per_case)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _prepare_out(out, args.force)
    _, manifest = synthesize_dataset(spec, args.seed, out)
    write_run_manifest(out, argv, json.dumps(vars(args), sort_keys=True, default=str), args.seed)
    print(f"wrote {spec.n_clips + 2 * spec.eval_clips} clips to {out} (manifest {manifest.name})")
    return EXIT_OK


def _training_records(data, all_clips: bool):
    records = filter_split(scan_dataset(data), "train")
    if not records:
        raise DataError(f"no positive training clips under {data}")
    return records if all_clips else select_first_clip_per_polyp(records)


def _train_flags(args):
    return {
        ("train", "seed"): args.seed,
        ("train", "epochs"): args.epochs,
        ("train", "max_steps"): args.max_steps,
    }


def cmd_train(args, argv) -> int:
    from .plotting import plot_loss_curve
    from .training import run_cv

    model_cfg, train_cfg = resolve_config(args.config, args.set, _train_flags(args))
    if args.fold is not None and not 0 <= args.fold < train_cfg.folds:
        raise UsageError(f"--fold {args.fold} out of range; valid folds are 0..{train_cfg.folds - 1}")
    records = _training_records(args.data, args.all_clips)
    out = Path(args.out)
    _prepare_out(out, args.force)
    config_text = dump_config(model_cfg, train_cfg)
    (out / "config.yaml").write_text(config_text)
    folds = None if args.fold is None else [args.fold]
    summary = run_cv(records, model_cfg, train_cfg, out, folds=folds)
    for result in summary.results:
        plot_loss_curve(result.losses, result.out_dir / "loss_curve.png")
    write_run_manifest(out, argv, config_text, train_cfg.seed)
    for m, s in summary.stats.items():
        print(f"{m:7s} min {s['min']:.4f} mean {s['mean']:.4f} max {s['max']:.4f}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .evaluation import GroundTruthOracle, emit_report, evaluate_split

    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; valid splits are {', '.join(SPLITS)}")
    if args.oracle == bool(args.ckpt):
        raise UsageError("pass exactly one of --ckpt or --oracle")
    if args.oracle:
        model = GroundTruthOracle()
        frames = args.frames or 5
        size = (args.size, args.size) if args.size else None
        config_text = json.dumps({"oracle": True, "frames": frames})
    else:
        config = None
        if args.config is not None:
            config, _ = load_config(args.config)
        model = load_checkpoint(args.ckpt, config)
        if args.frames:
            model = load_checkpoint(args.ckpt, model.config.replace(frames=args.frames))
        frames = model.config.frames
        size = None
        config_text = json.dumps(model.config.to_dict(), sort_keys=True)
    records = filter_split(scan_dataset(args.data), args.split)
    if not records:
        raise DataError(f"split {args.split!r} has no clips under {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_split(model, records, frames, size=size, batch_size=args.batch_size, split=args.split)
    emit_report(report, out)
    write_run_manifest(out, argv, config_text, getattr(getattr(model, "config", None), "seed", 0))
    agg = report.aggregate
    print(f"{args.split}: dice {agg.dice:.4f} iou {agg.iou:.4f} hd95 {agg.hd95:.2f} recall {agg.recall:.4f}")
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    from .evaluation import benchmark_fps
    from .plotting import plot_latencies

    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model_cfg, _ = resolve_config(args.config, args.set)
        model = PolypNextLSTM(model_cfg)
    try:
        result = benchmark_fps(model, trials=args.trials, warmup=args.warmup, frames=args.frames)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result["params"] = count_parameters(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(result, indent=2) + "\n")
    plot_latencies(result["latencies_s"], out / "bench_latency.png")
    md = [
        "| Params | FPS (median) | FPS IQR | latency [ms] | frames/window | hardware |",
        "|---|---|---|---|---|---|",
        f"| {result['params']['total'] / 1e6:.2f}M | {result['fps_median']:.1f} | {result['fps_iqr']:.1f} | "
        f"{1000 * result['latency_median_s']:.1f} | {result['frames_per_window']} | {result['hardware']} |",
    ]
    (out / "bench.md").write_text("\n".join(md) + "\n")
    write_run_manifest(out, argv, json.dumps(model.config.to_dict(), sort_keys=True), model.config.seed)
    print(f"FPS median {result['fps_median']:.1f} (IQR {result['fps_iqr']:.1f}) on {result['hardware']}")
    return EXIT_OK


def _parse_frames(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--frames expects a comma separated list of integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise UsageError(f"--frames values must be >= 1, got {text!r}")
    return values


def cmd_ablate(args, argv) -> int:
    from .ablation import ablate_frames

    F_values = _parse_frames(args.frames)
    model_cfg, train_cfg = resolve_config(args.config, args.set, _train_flags(args))
    records = _training_records(args.data, args.all_clips)
    out = Path(args.out)
    _prepare_out(out, args.force)
    config_text = dump_config(model_cfg, train_cfg)
    (out / "config.yaml").write_text(config_text)
    rows = ablate_frames(model_cfg, train_cfg, records, F_values, out)
    write_run_manifest(out, argv, config_text, train_cfg.seed)
    for r in rows:
        print(f"F={r['F']:2d} {r['metric']:7s} min {r['min']:.4f} mean {r['mean']:.4f} max {r['max']:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="polypnext",
        description="Video polyp segmentation: data synthesis, training, evaluation, benchmarking and ablation.",
        formatter_class=fmt,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic video polyp dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--clips", type=int, default=2, help="number of training clips")
    p.add_argument("--frames", type=int, default=10, help="frames per clip")
    p.add_argument("--size", type=int, default=256, help="square image size in pixels (>= 64)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--eval-clips", type=int, default=2, help="clips in each of easy_unseen and hard_unseen")
    p.add_argument("--clips-per-case", type=int, default=1, help="training clips sharing one polyp case")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    def add_config(p):
        p.add_argument("--config", default=None, help="YAML config with model/train/augment sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    def add_train_flags(p):
        p.add_argument("--seed", type=int, default=None, help="training seed (overrides config)")
        p.add_argument("--epochs", type=int, default=None, help="epochs per fold (overrides config)")
        p.add_argument("--max-steps", type=int, default=None, help="cap on optimizer steps per fold")
        p.add_argument("--all-clips", action="store_true", help="keep every training clip, not only the first per polyp")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = sub.add_parser("train", help="cross-validated training", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset root holding manifest.json")
    p.add_argument("--out", required=True, help="output directory for checkpoints and curves")
    p.add_argument("--fold", type=int, default=None, help="train only this fold; unset runs every fold")
    add_config(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset root holding manifest.json")
    p.add_argument("--split", required=True, help=f"one of {', '.join(SPLITS)}")
    p.add_argument("--ckpt", default=None, help="checkpoint file (.npz)")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (upper bound)")
    p.add_argument("--config", default=None, help="config the checkpoint must match")
    p.add_argument("--frames", type=int, default=None, help="window length; unset means the checkpoint config, or 5 with --oracle")
    p.add_argument("--size", type=int, default=None, help="evaluation size for --oracle; unset means the stored mask size")
    p.add_argument("--batch-size", type=int, default=4, help="windows per forward pass")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure inference throughput", formatter_class=fmt)
    p.add_argument("--ckpt", default=None, help="checkpoint file; default builds the configured model")
    add_config(p)
    p.add_argument("--trials", type=int, default=50, help="timed forward passes (>= 10)")
    p.add_argument("--warmup", type=int, default=5, help="untimed warmup passes (>= 3)")
    p.add_argument("--frames", type=int, default=5, help="frames per timed window")
    p.add_argument("--out", default="bench_out", help="report directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="frame-count ablation over cross-validation", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset root holding manifest.json")
    p.add_argument("--frames", required=True, help="comma separated window lengths, e.g. 1,3,5")
    p.add_argument("--out", required=True, help="output directory for table and figure")
    add_config(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
