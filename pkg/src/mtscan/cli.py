"""Command-line entry points: train, ablate, bench, inspect-scan.

Configuration is one JSON file with full defaulting; unknown keys are
rejected with their path.  Exit codes: 0 ok, 2 usage, 3 config/data error,
4 numeric failure.  MTSCAN_THREADS caps worker parallelism for ablation
arms.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .biscan import position_first_index_map, task_first_index_map
from .data import load_manifest
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    MtscanError,
    NumericalError,
    UsageError,
)
from .metrics import MetricReport, mtl_gain
from .model import (
    Model,
    ModelConfig,
    TaskSpec,
    count_flops,
    count_params,
    model_forward,
    save_checkpoint,
)
from .ssm import DIRECTIONS
from .tensor import Tensor, no_grad
from .train import (
    ABLATION_KINDS,
    TrainSettings,
    history_columns,
    run_ablation,
    train,
)


@dataclass(frozen=True)
class DataConfig:
    height: int = 64
    width: int = 64
    n_objects: int = 5
    num_classes: int = 5
    train_count: int = 256
    val_count: int = 64
    seed: int = 0
    train_manifest: str | None = None
    val_manifest: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSettings = field(default_factory=TrainSettings)


# ---------------------------------------------------------------------------
# strict config parsing


def _build(cls, raw: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under '{path}'")
    return raw


def _parse_model(raw: dict) -> ModelConfig:
    raw = dict(_build(ModelConfig, raw, "model"))
    if "tasks" in raw:
        tasks = []
        for i, t in enumerate(raw["tasks"]):
            _build(TaskSpec, t, f"model.tasks[{i}]")
            tasks.append(TaskSpec(**t))
        raw["tasks"] = tuple(tasks)
    if "scan_scales" in raw:
        ss = raw["scan_scales"]
        if ss and isinstance(ss[0], (int, float)):
            ss = [ss] * 3
        raw["scan_scales"] = tuple(tuple(int(s) for s in group) for group in ss)
    if raw.get("task_order") is not None:
        raw["task_order"] = tuple(raw["task_order"])
    return ModelConfig(**raw)


def _parse_train(raw: dict) -> TrainSettings:
    raw = dict(_build(TrainSettings, raw, "train"))
    if raw.get("crop_hw") is not None:
        raw["crop_hw"] = tuple(raw["crop_hw"])
    return TrainSettings(**raw)


def parse_run_config(spec: dict) -> RunConfig:
    _build(RunConfig, spec, "<root>")
    model = _parse_model(spec.get("model", {}))
    data = DataConfig(**_build(DataConfig, spec.get("data", {}), "data"))
    settings = _parse_train(spec.get("train", {}))
    for t in model.tasks:
        if t.name == "semseg" and t.out_channels < data.num_classes:
            raise ConfigError(
                f"semseg head has {t.out_channels} channels for {data.num_classes} classes"
            )
    return RunConfig(model, data, settings)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_run_config(spec)


def build_datasets(cfg: RunConfig):
    from .data import generate_dataset

    d = cfg.data
    if d.train_manifest:
        train_samples = load_manifest(d.train_manifest)
    else:
        train_samples = generate_dataset(d.seed, d.train_count, d.height, d.width,
                                         d.n_objects, d.num_classes)
    if d.val_manifest:
        val_samples = load_manifest(d.val_manifest)
    else:
        val_samples = generate_dataset(d.seed + 100_000, d.val_count, d.height,
                                       d.width, d.n_objects, d.num_classes)
    return train_samples, val_samples


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM; values are scaled to span 0..255."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values, dtype=np.uint8) if hi == lo else (
        (values - lo) / (hi - lo) * 255.0
    ).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(scaled.tobytes())


def load_metric_report(path) -> MetricReport:
    try:
        spec = json.loads(Path(path).read_text())
        return MetricReport(dict(spec["values"]),
                            {k: bool(v) for k, v in spec["higher_better"].items()})
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read metric report {path}: {exc}") from exc


def save_metric_report(path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(
        {"values": report.values, "higher_better": report.higher_better},
        indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.iters is not None:
        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iters))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, val_samples = build_datasets(cfg)
    reference = load_metric_report(args.stl_report) if args.stl_report else None

    result = train(cfg.model, train_samples, val_samples, cfg.train,
                   seed=args.seed, checkpoint_path=out / "best.ckpt",
                   reference=reference)
    save_checkpoint(out / "final.ckpt", result.model)
    write_csv(out / "history.csv", history_columns(cfg.model.tasks), result.history)
    save_metric_report(out / "metrics.json", result.final_report)

    for task, value in result.final_report.values.items():
        arrow = "higher" if result.final_report.higher_better[task] else "lower"
        print(f"{task}: {value:.6f} ({arrow} better)")
    print(f"val_loss: {result.final_val_loss:.6f}")
    if reference is not None:
        print(f"delta_m vs reference: {mtl_gain(result.final_report, reference):+.4f}")
    return 0


_ABLATION_OVERRIDES = {
    # divisibility at desk scale: scale 3 and the {1,2,4,6} ladder need a
    # 96x96 input; three branches need channels divisible by 3
    "scan_scale": {"height": 96, "width": 96},
    "scan_number": {"height": 96, "width": 96, "base_channels": 24},
}


def cmd_ablate(args) -> int:
    if args.kind not in ABLATION_KINDS:
        raise UsageError(f"unsupported ablation kind '{args.kind}' "
                         f"(choose from {', '.join(ABLATION_KINDS)})")
    cfg = load_run_config(args.config)
    over = _ABLATION_OVERRIDES.get(args.kind, {})
    if over:
        data_over = {k: v for k, v in over.items() if k in ("height", "width")}
        cfg = replace(cfg, data=replace(cfg.data, **data_over))
        if "base_channels" in over:
            cfg = replace(cfg, model=replace(cfg.model,
                                             base_channels=over["base_channels"]))
        print(f"note: {args.kind} runs at "
              f"{cfg.data.height}x{cfg.data.width}, C={cfg.model.base_channels}")
    if args.iters is not None:
        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iters))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    train_samples, val_samples = build_datasets(cfg)
    stl = load_metric_report(args.stl_report) if args.stl_report else None

    rows = run_ablation(args.kind, cfg.model, train_samples, val_samples,
                        cfg.train, seeds=seeds, stl=stl,
                        max_workers=_max_workers())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["arm"] + [t.name for t in cfg.model.tasks] + [
        "val_loss", "delta_m", "flops", "params"]
    path = out_dir / f"ablation_{args.kind}.csv"
    write_csv(path, columns, rows)
    print(f"wrote {path}")
    return 0


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MTSCAN_THREADS", "1")))
    except ValueError:
        return 1


def _ladder_config(base: ModelConfig, n_tasks: int) -> ModelConfig:
    """Uniform single-channel regression tasks isolate the per-task cost."""
    tasks = tuple(TaskSpec(f"task{i}", 1, "l1") for i in range(n_tasks))
    return replace(base, tasks=tasks, task_order=None)


def _parse_task_range(spec: str) -> list[int]:
    try:
        if ".." in spec:
            lo, hi = spec.split("..")
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(s) for s in spec.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse task range '{spec}'") from exc
    if not out or min(out) < 1:
        raise UsageError(f"invalid task range '{spec}'")
    return out


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config)
    h, w = cfg.data.height, cfg.data.width
    task_counts = _parse_task_range(args.tasks)
    rows = []
    timings = []
    image = Tensor(np.random.default_rng(0).uniform(0, 1, (3, h, w)))
    for n_tasks in task_counts:
        lcfg = _ladder_config(cfg.model, n_tasks)
        flops = count_flops(lcfg, h, w)
        params = count_params(lcfg)
        model = Model(lcfg, seed=0, input_hw=(h, w))
        with no_grad():
            model_forward(model, image)  # warm the kernels
            t0 = time.perf_counter()
            model_forward(model, image)
            wall = time.perf_counter() - t0
        rows.append({"tasks": n_tasks, "flops": flops, "params": params})
        timings.append({"tasks": n_tasks, "forward_seconds": wall})

    for prev, cur in zip(rows, rows[1:]):
        cur["flops_increment"] = cur["flops"] - prev["flops"]
        cur["params_increment"] = cur["params"] - prev["params"]
    fl_inc = {r["flops_increment"] for r in rows[1:]}
    pa_inc = {r["params_increment"] for r in rows[1:]}
    if len(rows) > 2 and (len(fl_inc) != 1 or len(pa_inc) != 1):
        raise NumericalError("analytic counts are not affine in the task count")

    write_csv(args.out, ["tasks", "flops", "params", "flops_increment",
                         "params_increment"], rows)
    for t, r in zip(timings, rows):
        print(f"T={r['tasks']}: flops={r['flops']} params={r['params']} "
              f"forward={t['forward_seconds']:.3f}s")
    if rows[1:]:
        print(f"per-task increments: +{rows[1]['flops_increment']} flops, "
              f"+{rows[1]['params_increment']} params")
    if args.timing_out:
        write_csv(args.timing_out, ["tasks", "forward_seconds"], timings)
    print(f"wrote {args.out}")
    return 0


def cmd_inspect_scan(args) -> int:
    if args.mode not in ("tf", "pf"):
        raise UsageError("--mode must be tf or pf")
    if args.pattern not in DIRECTIONS:
        raise UsageError(f"--pattern must be one of {', '.join(DIRECTIONS)}")
    n_tasks, h, w = args.tasks, getattr(args, "h"), getattr(args, "w")
    if n_tasks < 1 or h < 1 or w < 1:
        raise UsageError("--tasks, --h, --w must be positive")
    order = tuple(range(n_tasks))
    build = task_first_index_map if args.mode == "tf" else position_first_index_map
    perm = build(args.pattern, order, n_tasks, h, w)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for pos, slot in enumerate(perm):
        task, pixel = divmod(int(slot), h * w)
        rows.append({"sequence_position": pos, "token_id": int(slot),
                     "task": task, "row": pixel // w, "col": pixel % w})
    write_csv(out.with_suffix(".csv"), ["sequence_position", "token_id", "task",
                                        "row", "col"], rows)

    ranks = np.empty_like(perm)
    ranks[perm] = np.arange(perm.size)
    for t in range(n_tasks):
        heat = ranks[t * h * w:(t + 1) * h * w].reshape(h, w).astype(float)
        write_pgm(out.with_suffix(f".task{t}.pgm"), heat)
    print(f"wrote {out.with_suffix('.csv')} and {n_tasks} heatmap(s)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtscan",
        description="Train, ablate, and inspect multi-task scan models on "
                    "synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write history + checkpoints")
    p.add_argument("--config", default=None, help="JSON run config (defaults if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=None, help="override train.iterations")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stl-report", default=None,
                   help="metrics.json of a single-task reference for the gain printout")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="run one ablation and write its table")
    p.add_argument("kind", help=f"one of {', '.join(ABLATION_KINDS)}")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--stl-report", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="analytic complexity vs task count")
    p.add_argument("--config", default=None)
    p.add_argument("--tasks", default="2..6", help="range '2..6' or list '2,3,4'")
    p.add_argument("--out", required=True, help="CSV of analytic counts")
    p.add_argument("--timing-out", default=None,
                   help="optional CSV sidecar for (non-deterministic) wallclock")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect-scan", help="dump a serialization order")
    p.add_argument("--mode", required=True, help="tf or pf")
    p.add_argument("--pattern", default="row_fwd")
    p.add_argument("--tasks", type=int, default=2)
    p.add_argument("--h", type=int, default=4)
    p.add_argument("--w", type=int, default=4)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(fn=cmd_inspect_scan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except MtscanError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
