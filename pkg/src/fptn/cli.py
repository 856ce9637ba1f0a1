"""Command-line surface: ingest, train, evaluate, predict, gradcheck, sweep, ablation.

Run configurations are JSON documents validated against ``RUN_CONFIG_SCHEMA``
(unknown keys are rejected) before any work starts. Exit codes are stable:
0 success, 1 a verification or metric failure (failed gradient check,
training divergence), 2 bad input or configuration.

Setting ``FPTN_DETERMINISTIC=1`` pins the numeric backends to one thread
(see the package ``__init__``) so repeated runs produce byte-identical
artifacts apart from timing columns.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from jsonschema import Draft202012Validator

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import reference, synthetic, training
from .errors import (CompatibilityError, ConfigurationError, FptnError,
                     UserInputError)
from .model import ModelConfig, ModelParams, gradient_check_model
from .training import TrainConfig

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fptn run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model", "train", "output"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path", "format"],
            "properties": {
                "path": {"type": "string"},
                "format": {"enum": ["csv", "fptn"]},
                "split_ratio": {"type": "string"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d_model", "h", "L", "T", "K"],
            "properties": {
                "d_model": {"type": "integer", "minimum": 1},
                "h": {"type": "integer", "minimum": 1},
                "L": {"type": "integer", "minimum": 0},
                "T": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 1},
                "time_embedding": {"type": "boolean"},
                "positional_mode": {"enum": ["none", "fixed", "learnable"]},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dir"],
            "properties": {"dir": {"type": "string"}},
        },
    },
}

GRID_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d_model": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "L": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "h": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "lr": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
    },
}


def _load_json(path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"{what} file {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc


def _validate(instance: dict, schema: dict, source: str) -> None:
    errors = sorted(Draft202012Validator(schema).iter_errors(instance),
                    key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.path) or "<root>"
        raise ConfigurationError(f"{source}: schema violation at {where}: {first.message}")


def load_run_config(path) -> dict:
    """Parse and fully validate a run configuration; raises before any work."""
    cfg = _load_json(path, "run config")
    _validate(cfg, RUN_CONFIG_SCHEMA, str(path))
    m = cfg["model"]
    if m["d_model"] % m["h"] != 0:
        raise ConfigurationError(
            f"{path}: d_model ({m['d_model']}) must be divisible by h ({m['h']})")
    if m["d_model"] <= m["T"]:
        raise ConfigurationError(
            f"{path}: d_model ({m['d_model']}) must exceed T ({m['T']})")
    ratio = cfg["dataset"].get("split_ratio", "6:2:2")
    data_mod.parse_split_ratio(ratio)
    return cfg


def _model_config(cfg: dict, n_sensors: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        n_sensors=n_sensors,
        input_steps=m["T"],
        horizon=m["K"],
        d_model=m["d_model"],
        n_heads=m["h"],
        n_layers=m["L"],
        use_time_embedding=m.get("time_embedding", True),
        positional_mode=m.get("positional_mode", "learnable"),
        dropout=m.get("dropout", 0.0),
        seed=cfg["train"].get("seed", 0),
    )


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t.get("epochs", 400),
        batch_size=t.get("batch_size", 64),
        lr=t.get("lr", 1e-3),
        patience=t.get("patience", 40),
        seed=t.get("seed", 0),
    )


def _locked_output_dir(cfg: dict) -> tuple[Path, FileLock]:
    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(out_dir / ".fptn.lock")
    try:
        lock.acquire(timeout=0.5)
    except Timeout:
        raise ConfigurationError(f"output directory {out_dir} is locked by another run")
    return out_dir, lock


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    series = data_mod.load_raw(args.input, args.format)
    data_mod.save_binary(series, args.output)
    last = series.timestamp(series.total_steps - 1)
    print(f"{series.n_sensors} sensors, {series.total_steps} steps")
    print(f"range {series.start_timestamp.isoformat()} .. {last.isoformat()} "
          f"({series.step_minutes}-minute steps)")
    print(f"wrote {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    raw = data_mod.load_raw(cfg["dataset"]["path"], cfg["dataset"]["format"])
    ratio = cfg["dataset"].get("split_ratio", "6:2:2")
    m = cfg["model"]
    train_set, val_set, test_set, stats = data_mod.prepare_dataset(
        raw, m["T"], m["K"], ratio)
    model_config = _model_config(cfg, raw.n_sensors)
    train_config = _train_config(cfg)
    out_dir, lock = _locked_output_dir(cfg)

    with lock:
        result = training.train(ModelParams(model_config), train_set, val_set,
                                train_config, stats)
        training.write_history_csv(result.history, out_dir / "history.csv")
        ckpt = ckpt_io.Checkpoint(params=result.params, norm_stats=stats,
                                  split_ratio=ratio, dataset_name=raw.name)
        ckpt_io.save(ckpt, out_dir / "checkpoint.ckpt")

        report = {
            "best_epoch": result.best_epoch,
            "epochs_ran": result.epochs_ran,
            "stopped_early": result.stopped_early,
            "diverged": result.diverged,
            "best_val_mae": result.best_val_mae,
            "test": None,
        }
        if not result.diverged:
            test_metrics = training.evaluate_split(result.params, test_set, stats)
            report["test"] = test_metrics.to_dict()
            if args.full and raw.name in reference.FULL_SCALE_RESULTS:
                ref = reference.FULL_SCALE_RESULTS[raw.name]
                report["full_scale_reference"] = {
                    "published": ref,
                    "delta_mae": test_metrics.mae - ref["mae"],
                    "delta_rmse": test_metrics.rmse - ref["rmse"],
                }
        (out_dir / "metrics.json").write_text(json.dumps(report, indent=2))
        print(json.dumps(report, indent=2))
    return 1 if result.diverged else 0


def _rebuild_splits(ckpt: ckpt_io.Checkpoint, raw: data_mod.RawSeries):
    """Reconstruct the exact train-time splits from checkpoint metadata."""
    if raw.n_sensors != ckpt.config.n_sensors:
        raise CompatibilityError(
            f"checkpoint expects {ckpt.config.n_sensors} sensors, "
            f"dataset has {raw.n_sensors}")
    if ckpt.norm_stats is None:
        raise ConfigurationError("checkpoint carries no normalization statistics")
    ratio = ckpt.split_ratio or "6:2:2"
    normalized = data_mod.RawSeries(
        data_mod.apply_zscore(raw.values, ckpt.norm_stats),
        raw.start_timestamp, raw.step_minutes, raw.name)
    samples = data_mod.make_windows(normalized, ckpt.norm_stats,
                                    ckpt.config.input_steps, ckpt.config.horizon)
    return data_mod.split_samples(samples, ratio)


def cmd_evaluate(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    raw = data_mod.load_raw(args.dataset, args.format)
    splits = dict(zip(("train", "val", "test"), _rebuild_splits(ckpt, raw)))
    metrics = training.evaluate_split(ckpt.params, splits[args.split], ckpt.norm_stats)
    print(json.dumps({"split": args.split, "metrics": metrics.to_dict()}, indent=2))
    return 0


def cmd_predict(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    raw = data_mod.load_raw(args.dataset, args.format)
    if not 0 <= args.sensor < raw.n_sensors:
        raise UserInputError(
            f"sensor index {args.sensor} out of range for {raw.n_sensors} sensors")
    _, _, test_set = _rebuild_splits(ckpt, raw)
    cfg = ckpt.config
    horizon = args.horizon if args.horizon is not None else cfg.horizon
    if not 1 <= horizon <= cfg.horizon:
        raise UserInputError(f"horizon must be in [1, {cfg.horizon}], got {horizon}")
    try:
        lo, hi = (int(part) for part in args.window.split(":"))
    except ValueError:
        raise UserInputError(f"window must look like START:END, got {args.window!r}")
    if not 0 <= lo < hi <= len(test_set):
        raise UserInputError(
            f"window [{lo}:{hi}) outside the test split (0..{len(test_set)} predictable steps)")

    indices = np.arange(lo, hi)
    rows = []
    for chunk_lo in range(0, len(indices), training.EVAL_BATCH):
        chunk = indices[chunk_lo:chunk_lo + training.EVAL_BATCH]
        x, _, tf = test_set.batch(chunk)
        from .model import forward
        yhat = forward(x, tf, ckpt.params, mode="eval").data
        yhat_raw = data_mod.invert_zscore(yhat, ckpt.norm_stats)
        for offset, sample_idx in enumerate(chunk):
            step = int(test_set.starts[sample_idx]) + cfg.input_steps + horizon - 1
            rows.append((raw.timestamp(step).isoformat(),
                         float(raw.values[step, args.sensor, 0]),
                         float(yhat_raw[offset, args.sensor, horizon - 1])))

    out = Path(args.output)
    with open(out, "w") as fh:
        fh.write("timestamp,ground_truth,prediction\n")
        for ts, truth, pred in rows:
            fh.write(f"{ts},{truth!r},{pred!r}\n")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        cfg = load_run_config(args.config)
        m = cfg["model"]
        model_config = ModelConfig(
            n_sensors=args.sensors, input_steps=m["T"], horizon=m["K"],
            d_model=m["d_model"], n_heads=m["h"], n_layers=m["L"],
            use_time_embedding=m.get("time_embedding", True),
            positional_mode=m.get("positional_mode", "learnable"),
            seed=cfg["train"].get("seed", 0))
    else:
        model_config = ModelConfig(n_sensors=args.sensors, input_steps=4, horizon=2,
                                   d_model=8, n_heads=2, n_layers=args.layers, seed=0)
    if model_config.n_sensors > 4 or model_config.d_model > 16:
        raise ConfigurationError(
            f"gradcheck is restricted to tiny configs (sensors <= 4, d_model <= 16); "
            f"got sensors={model_config.n_sensors}, d_model={model_config.d_model}")
    check = gradient_check_model(model_config, step=args.step, tolerance=args.tolerance,
                                 seed=args.seed, corrupt=args.corrupt)
    for line in check.report.lines():
        print(line)
    if not check.passed:
        worst = check.report.worst_parameter
        print(f"FAILED parameter group: {worst}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    grid = _load_json(args.grid, "sweep grid")
    _validate(grid, GRID_SCHEMA, str(args.grid))
    raw = data_mod.load_raw(cfg["dataset"]["path"], cfg["dataset"]["format"])
    m = cfg["model"]
    train_set, val_set, _, stats = data_mod.prepare_dataset(
        raw, m["T"], m["K"], cfg["dataset"].get("split_ratio", "6:2:2"))
    out_dir, lock = _locked_output_dir(cfg)
    with lock:
        results = training.grid_search(
            _model_config(cfg, raw.n_sensors), grid, train_set, val_set, stats,
            _train_config(cfg), budget_epochs=args.epochs)
        training.write_sweep_csv(results, out_dir / "sweep.csv")
    for r in results:
        print(f"d_model={r.d_model} L={r.n_layers} h={r.n_heads} lr={r.lr} "
              f"val_mae={r.val_mae:.6f}")
    print(f"wrote {out_dir / 'sweep.csv'}")
    return 0


def cmd_ablation(args) -> int:
    cfg = load_run_config(args.config)
    raw = data_mod.load_raw(cfg["dataset"]["path"], cfg["dataset"]["format"])
    m = cfg["model"]
    train_set, val_set, _, stats = data_mod.prepare_dataset(
        raw, m["T"], m["K"], cfg["dataset"].get("split_ratio", "6:2:2"))
    out_dir, lock = _locked_output_dir(cfg)
    with lock:
        rows = training.run_embedding_ablation(
            _model_config(cfg, raw.n_sensors), train_set, val_set, stats,
            _train_config(cfg))
        training.write_ablation_csv(rows, out_dir / "ablation.csv")
    for r in rows:
        print(f"time_embedding={r.time_embedding} positional={r.positional_mode} "
              f"val_mae={r.val_mae:.6f}")
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fptn",
        description="Sensor-token transformer forecaster for multi-sensor traffic series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a raw dataset and write the binary format")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "fptn"], default="csv")
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--full", action="store_true",
                   help="compare final test metrics against published full-scale results")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["csv", "fptn"], default="fptn")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="export a truth/prediction curve for one sensor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["csv", "fptn"], default="fptn")
    p.add_argument("--sensor", type=int, required=True)
    p.add_argument("--window", required=True,
                   help="START:END range of predictable test steps")
    p.add_argument("--horizon", type=int, default=None,
                   help="forecast step to plot, 1..K (default K)")
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="compare analytic and finite-difference gradients on a tiny model")
    p.add_argument("--config", default=None)
    p.add_argument("--sensors", type=int, default=3)
    p.add_argument("--layers", type=int, default=1,
                   help="layer count when no config is given (0 = head-only)")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None,
                   help="testing hook: poison this parameter's analytic gradient")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid search over d_model/L/h/lr")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--epochs", type=int, default=None,
                   help="reduced per-config epoch budget")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("ablation",
                       help="train the six time/positional embedding variants")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_ablation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FptnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
