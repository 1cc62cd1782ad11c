"""Experiment command line: distribution search, GEMM benchmarks, training
runs, ablations and schedule tables.

Commands emit CSV/JSON results plus rendered figures next to them
(suppressed with --no-plot).  Every command is deterministic given its seed
inputs; timing columns are the only fields allowed to differ between runs.
Exit codes: 0 success, 2 user or config error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

from . import data as data_mod
from . import plots
from .errors import ConfigError, ParameterError, ShapeError
from .layers import DropoutMode
from .maskmm import bench_masked_matmul, resolve_threads, write_bench_csv
from .patterns import PatternKind, TileConfig, pattern_space, row_mask, tile_mask
from .schedule import build_schedule, save_schedule_csv
from .search import SearchConfig, save_distribution, search_distribution
from .sensitivity import SensitivityConfig
from .tensor import make_rng
from .train import (ModelSpec, TrainConfig, TrainLog, ablate_magnitude_parts,
                    ablate_weight_vs_input, cnn_spec, lstm_spec, mlp_spec,
                    train_cnn, train_lstm, train_mlp)


def _take(doc: dict, allowed: dict, context: str) -> dict:
    """Strict-key extraction: unknown keys are config errors."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{context}: expected an object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    out = dict(allowed)
    out.update(doc)
    return out


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _mode(name: str) -> DropoutMode:
    try:
        return DropoutMode(name)
    except ValueError:
        raise ConfigError(f"unknown dropout mode {name!r}") from None


def _image_dataset(doc: dict):
    kind = doc.get("kind")
    if kind == "synthetic":
        d = _take(doc, {"kind": None, "train": 10000, "test": 2000,
                        "noise": 0.25, "seed": 42}, "dataset")
        return data_mod.synthetic_dataset(d["train"], d["test"], d["seed"], d["noise"])
    if kind == "idx":
        d = _take(doc, {"kind": None, "train_images": None, "train_labels": None,
                        "test_images": None, "test_labels": None}, "dataset")
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if d[key] is None:
                raise ConfigError(f"dataset: missing {key}")
        return data_mod.load_idx_dataset(d["train_images"], d["train_labels"],
                                         d["test_images"], d["test_labels"])
    raise ConfigError(f"dataset: unknown kind {kind!r}")


def _text_dataset(doc: dict):
    kind = doc.get("kind")
    if kind == "synthetic-text":
        d = _take(doc, {"kind": None, "length": 50000, "seed": 3}, "dataset")
        return data_mod.synthetic_text(d["length"], d["seed"])
    if kind == "text":
        d = _take(doc, {"kind": None, "path": None}, "dataset")
        if d["path"] is None:
            raise ConfigError("dataset: missing path")
        return data_mod.load_text(d["path"])
    raise ConfigError(f"dataset: unknown kind {kind!r}")


def _train_config(doc: dict) -> TrainConfig:
    d = _take(doc, {"batch_size": 128, "learning_rate": 0.01, "momentum": 0.9,
                    "epochs": 10, "seed": 0}, "train")
    return TrainConfig(**d)


def _sensitivity_config(doc: dict | None) -> SensitivityConfig | None:
    if doc is None:
        return None
    d = _take(doc, {"region_rows": 8, "region_cols": 8, "sample_fraction": 0.3,
                    "vote_threshold": 0.5, "value_threshold": None,
                    "drop_prob_sensitive": 0.1, "drop_prob_insensitive": 0.5},
              "sensitivity")
    return SensitivityConfig(**d)


def _model_spec(model: str, doc: dict, vocab_size: int | None = None) -> ModelSpec:
    if model == "mlp":
        d = _take(doc, {"sizes": [784, 256, 256, 10], "dropout": "none",
                        "rate": 0.5, "tile": [32, 32], "support_cap": 64}, "model")
        spec = mlp_spec(d["sizes"], _mode(d["dropout"]), d["rate"], tuple(d["tile"]))
        return ModelSpec(spec.kind, spec.layers, d["support_cap"])
    if model == "lstm":
        d = _take(doc, {"hidden": 64, "dropout": "none", "rate": 0.5,
                        "tile": [16, 16], "support_cap": 64}, "model")
        spec = lstm_spec(vocab_size, d["hidden"], _mode(d["dropout"]), d["rate"],
                         tuple(d["tile"]))
        return ModelSpec(spec.kind, spec.layers, d["support_cap"])
    if model == "cnn":
        d = _take(doc, {"image": [1, 28, 28], "convs": [[8, 5, 2, 0], [16, 3, 2, 0]],
                        "hidden": 64, "classes": 10, "dropout": "none",
                        "sensitivity": None, "tile": [32, 8], "support_cap": 64},
                  "model")
        spec = cnn_spec(tuple(d["image"]), tuple(tuple(c) for c in d["convs"]),
                        d["hidden"], d["classes"], _mode(d["dropout"]),
                        _sensitivity_config(d["sensitivity"]), tuple(d["tile"]))
        return ModelSpec(spec.kind, spec.layers, d["support_cap"])
    raise ConfigError(f"unknown model {model!r}")


def _write_epoch_csv(log: TrainLog, path) -> None:
    if not log.epochs:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(log.epochs[0]))
        writer.writeheader()
        writer.writerows(log.epochs)


def _record_config(doc: dict, out_dir: Path) -> None:
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def cmd_search(args) -> int:
    cfg = SearchConfig(pattern_count=args.dp_max, target_rate=args.target_rate,
                       entropy_weight=args.entropy_weight,
                       learning_rate=args.learning_rate, max_steps=args.max_steps)
    dist = search_distribution(cfg, make_rng(args.seed))
    save_distribution(dist, args.out)
    print(f"achieved_rate={dist.achieved_rate:.6f} entropy={dist.entropy():.6f} "
          f"converged={dist.converged}")
    if args.plot:
        plots.plot_distribution(dist, Path(args.out).with_suffix(".png"))
    return 0


def cmd_bench_gemm(args) -> int:
    rng = make_rng(args.seed)
    tile = TileConfig(*args.tile)
    rows = []
    for keep in args.keep:
        if not 0.0 < keep <= 1.0:
            raise ParameterError(f"keep fraction {keep} outside (0, 1]")
        period = max(1, round(1.0 / keep))
        if args.granularity == "row":
            mask = row_mask(min(period, args.m), 1, args.m)
        else:
            space = pattern_space(PatternKind.TILE, args.m, args.k, tile)
            mask = tile_mask(min(period, space), 1, args.m, args.k, tile)
        rows.append(bench_masked_matmul(args.m, args.k, args.n, mask,
                                        reps=args.reps, rng=rng,
                                        threads=resolve_threads(args.threads)))
    write_bench_csv(rows, args.csv)
    for row in rows:
        print(f"keep={row['keep_fraction']:.3f} speedup={row['speedup']:.2f} "
              f"macs={row['macs_performed']}/{row['macs_dense']}")
    if args.plot:
        plots.plot_bench(rows, Path(args.csv).with_suffix(".png"))
    return 0


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    doc = _take(doc, {"dataset": {}, "model": {}, "train": {}, "schedule": None,
                      "sequence": None}, "config")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(doc["train"])
    schedule = None
    if args.model == "lstm":
        dataset = _text_dataset(doc["dataset"])
        spec = _model_spec("lstm", doc["model"], dataset.vocab_size)
        seq = _take(doc["sequence"] or {}, {"seq_len": 32, "iters_per_epoch": 100,
                                            "test_fraction": 0.1}, "sequence")
        log = train_lstm(spec, cfg, dataset, seq["seq_len"],
                         seq["iters_per_epoch"], seq["test_fraction"])
    else:
        dataset = _image_dataset(doc["dataset"])
        spec = _model_spec(args.model, doc["model"])
        if args.model == "cnn" and doc["schedule"] is not None:
            s = _take(doc["schedule"], {"mean": 0.4, "min": 0.1, "max": 0.6,
                                        "shape": 3.0}, "schedule")
            schedule = build_schedule(max(cfg.epochs, 1), s["mean"], s["min"],
                                      s["max"], s["shape"])
            log = train_cnn(spec, cfg, dataset, schedule)
        elif args.model == "cnn":
            log = train_cnn(spec, cfg, dataset)
        else:
            log = train_mlp(spec, cfg, dataset)
    log.save_jsonl(out_dir / "train_log.jsonl")
    _write_epoch_csv(log, out_dir / "epochs.csv")
    _record_config(doc, out_dir)
    if log.epochs:
        final = log.epochs[-1]
        metric = "test_acc" if "test_acc" in final else "test_perplexity"
        print(f"final {metric}={final[metric]:.4f} "
              f"dropout_mac_ratio={log.dropout_mac_ratio():.4f}")
        if args.plot:
            plots.plot_training({args.model: log}, out_dir / "training.png")
    else:
        print("no epochs trained")
    return 0


def cmd_ablate(args) -> int:
    doc = _load_config(args.config)
    doc = _take(doc, {"dataset": {}, "model": {}, "train": {}, "ablate": {}},
                "config")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _image_dataset(doc["dataset"])
    cfg = _train_config(doc["train"])
    spec = _model_spec("cnn", doc["model"])
    if args.mode == "weight-vs-input":
        ab = _take(doc["ablate"], {"fraction": 0.4}, "ablate")
        logs = ablate_weight_vs_input(spec, cfg, dataset, ab["fraction"])
        rows = [{"target": name, "fraction": ab["fraction"],
                 "final_acc": log.final_test_accuracy()}
                for name, log in logs.items()]
        with open(out_dir / "weight_vs_input.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["target", "fraction", "final_acc"])
            writer.writeheader()
            writer.writerows(rows)
        for row in rows:
            print(f"{row['target']}: final_acc={row['final_acc']:.4f}")
        if args.plot:
            plots.plot_training(logs, out_dir / "weight_vs_input.png")
    else:
        ab = _take(doc["ablate"], {"parts": 4, "rates": [0.4]}, "ablate")
        rows = []
        for rate in ab["rates"]:
            for part in range(1, ab["parts"] + 1):
                log = ablate_magnitude_parts(spec, cfg, dataset, ab["parts"],
                                             part, rate)
                rows.append({"part": part, "rate": rate,
                             "final_acc": log.final_test_accuracy()})
                print(f"part={part} rate={rate}: "
                      f"final_acc={rows[-1]['final_acc']:.4f}")
        with open(out_dir / "magnitude_parts.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["part", "rate", "final_acc"])
            writer.writeheader()
            writer.writerows(rows)
        if args.plot:
            plots.plot_part_sweep(rows, out_dir / "magnitude_parts.png")
    _record_config(doc, out_dir)
    return 0


def cmd_schedule(args) -> int:
    out = Path(args.plot_csv)
    schedules = {}
    for shape in args.shape:
        sched = build_schedule(args.epochs, args.mean, args.min, args.max, shape,
                               mode_fraction=args.mode_fraction)
        label = f"shape={shape:g}"
        schedules[label] = sched
        path = out if len(args.shape) == 1 else \
            out.with_name(f"{out.stem}_shape{shape:g}{out.suffix}")
        save_schedule_csv(sched, path)
        print(f"{label}: achieved_mean={sched.achieved_mean_ratio:.6f} "
              f"peak={sched.ratios.max():.4f} clamped={sched.clamped}")
    if args.plot:
        plots.plot_schedule(schedules, out.with_suffix(".png"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structdrop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="search a dropout-period distribution")
    p.add_argument("--target-rate", type=float, required=True)
    p.add_argument("--dp-max", type=int, required=True)
    p.add_argument("--entropy-weight", type=float, default=0.01)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--max-steps", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench-gemm", help="time masked vs dense products")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--granularity", choices=["row", "tile"], default="row")
    p.add_argument("--keep", type=float, nargs="+", required=True)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--tile", type=int, nargs=2, default=[32, 32])
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", required=True)
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_bench_gemm)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--model", choices=["mlp", "lstm", "cnn"], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="sensitivity ablation studies")
    p.add_argument("--mode", choices=["weight-vs-input", "magnitude-parts"],
                   required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="runs/ablate")
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("schedule", help="emit a dropout-ratio schedule table")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--mean", type=float, required=True)
    p.add_argument("--min", type=float, default=0.1)
    p.add_argument("--max", type=float, default=0.6)
    p.add_argument("--shape", type=float, nargs="+", default=[3.0])
    p.add_argument("--mode-fraction", type=float, default=0.4)
    p.add_argument("--plot-csv", required=True)
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_schedule)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
