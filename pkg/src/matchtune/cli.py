"""Command-line entry point: gen, train, eval, sweep, diagnose.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
divergence, 4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .attacks import AttackConfig, robust_accuracy
from .data import DatasetSpec, generate, load_dataset, save_dataset
from .errors import ConfigError, DataError, MatchTuneError
from .experiment import load_config, run_experiment, run_sweep
from .training import TrainConfig, evaluate_model, load_model, model_sharpness

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3, 4

log = logging.getLogger("matchtune")


def _override(cfg, args):
    changes = {}
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        changes["base_seed"] = args.seed
    if getattr(args, "repeat", None) is not None:
        if args.repeat < 1:
            raise ConfigError("--repeat must be >= 1")
        changes["repeat"] = args.repeat
    if getattr(args, "match_at_eval", False):
        changes["train"] = replace(cfg.train, eval_match=True)
    return replace(cfg, **changes) if changes else cfg


def _parse_grid(items):
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        grid[key.strip()] = [yaml.safe_load(v) for v in values.split(",")]
    return grid


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args):
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists (use --force to overwrite)")
    raw = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    raw = raw or {}
    section = raw.get("dataset", raw) if isinstance(raw, dict) else raw
    if not isinstance(section, dict):
        raise ConfigError("dataset spec must be a mapping")
    spec = DatasetSpec.from_dict(section)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    dataset = generate(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset)} instances to {out}")
    labels, counts = _label_counts(dataset)
    print("labels: " + ", ".join(f"{k}={v}" for k, v in zip(labels, counts)))
    groups = dataset.group_counts()
    if groups:
        print(f"groups ({len(groups)}): " + ", ".join(f"{g}={c}" for g, c in groups.items()))
    return EXIT_OK


def _label_counts(dataset):
    if not dataset.is_classification:
        return [], []
    values, counts = np.unique(dataset.labels, return_counts=True)
    return [int(v) for v in values], [int(c) for c in counts]


def cmd_train(args):
    cfg = _override(load_config(args.config), args)
    run_dir, summary = run_experiment(cfg, force=args.force)
    _print_summary(summary)
    print(f"run directory: {run_dir}")
    return EXIT_DIVERGED if summary["failed"] else EXIT_OK


def _print_summary(summary):
    metric = summary["metric"]
    for run in summary["runs"]:
        value = (run["report"] or {}).get(metric)
        shown = "failed" if run["status"] != "ok" else f"{value:.4f}" if value is not None else "n/a"
        print(f"seed {run['seed']}: {metric} {shown}")
    if metric in summary["mean"]:
        print(f"{metric}: mean {summary['mean'][metric]:.4f} (max {summary['max'][metric]:.4f})")
    secs = summary["timing"]["epoch_seconds_mean"]
    if secs is not None:
        print(f"seconds per epoch: {secs:.3f}")


def cmd_eval(args):
    model_path = Path(args.model)
    if not model_path.exists():
        raise DataError(f"{model_path}: no such model file")
    model, meta = load_model(model_path)
    num_classes = model.head.width if model.task == "classification" else None
    dataset = load_dataset(args.data, num_classes=num_classes)
    enc = model.encoder.config
    if enc.kind == "mlp":
        if dataset.kind != "dense" or dataset.feature_dim != enc.input_dim:
            raise ConfigError(f"model expects {enc.input_dim}-dim features, data is {dataset.kind} with dim {dataset.feature_dim}")
    elif dataset.kind != "tokens" or dataset.max_token >= enc.input_dim:
        raise ConfigError(f"model expects token ids below {enc.input_dim}, data is {dataset.kind}")
    if model.task == "classification" and dataset.is_classification and int(dataset.labels.max()) >= num_classes:
        raise ConfigError(f"model has {num_classes} classes, data has label {int(dataset.labels.max())}")

    train_cfg = TrainConfig(encoder=enc, eval_match=args.match_at_eval, batch_size=args.batch_size, eval_batch_size=args.batch_size)
    report = evaluate_model(model, dataset, train_cfg)
    if args.attack:
        attack = AttackConfig(
            kind=args.attack_kind, epsilon=args.epsilon, steps=args.steps, step_size=args.step_size, seed=args.seed or 0
        )
        report.robust_accuracy, _ = robust_accuracy(model, dataset, attack, args.batch_size)
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else model_path.with_name(model_path.stem + ".eval.json")
    payload = report.as_dict()
    payload["config_hash"] = meta.get("config_hash")
    out.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args):
    cfg = _override(load_config(args.config), args)
    grid = dict(cfg.grid)
    grid.update(_parse_grid(args.grid))
    rows = run_sweep(cfg, grid, jobs=args.jobs, force=args.force)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    columns = ["name", *keys, "status", "mean", "max", "failed", "config_hash", "run_dir"]
    with open(out / f"{cfg.name}-sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    (out / f"{cfg.name}-sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True, default=str))
    metric = cfg.primary_metric
    for row in rows:
        params = " ".join(f"{k}={row[k]}" for k in keys)
        mean = "n/a" if row["mean"] is None else f"{row['mean']:.4f}"
        best = "n/a" if row["max"] is None else f"{row['max']:.4f}"
        print(f"{params or row['name']}: {metric} {mean} (max {best}) [{row['status']}]")
    return EXIT_PARTIAL if any(r["status"] != "ok" for r in rows) else EXIT_OK


def _read_log(path):
    records, bad = [], 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError
            except ValueError:
                bad += 1
                continue
            records.append(rec)
    return records, bad


def cmd_diagnose(args):
    run_dir = Path(args.run_dir)
    logs = sorted(run_dir.glob("seed-*/metrics.jsonl"))
    if not logs:
        raise DataError(f"{run_dir}: no metrics logs found")
    out = Path(args.out) if args.out else run_dir / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    skipped = 0
    mass_rows, loss_rows = [], []
    for path in logs:
        run = path.parent.name
        records, bad = _read_log(path)
        skipped += bad
        for rec in records:
            if rec.get("kind") != "step":
                continue
            try:
                step, epoch, loss = int(rec["step"]), int(rec["epoch"]), float(rec["loss"])
            except (KeyError, TypeError, ValueError):
                skipped += 1
                continue
            loss_rows.append([run, step, epoch, loss, rec.get("lr")])
            if rec.get("self_mass") is not None:
                mass_rows.append([run, step, rec["self_mass"], rec["positive_mass"], rec["negative_mass"]])
    _write_csv(out / "mass.csv", ["run", "step", "self", "positive", "negative"], mass_rows)
    _write_csv(out / "loss.csv", ["run", "step", "epoch", "loss", "lr"], loss_rows)
    print(f"mass rows: {len(mass_rows)}, loss rows: {len(loss_rows)}, skipped lines: {skipped}")
    if args.sharpness:
        radius, k = _parse_sharpness(args.sharpness)
        rows = []
        for path in logs:
            model_file, eval_file = path.parent / "model.bin", path.parent / "eval.jsonl"
            if not model_file.exists() or not eval_file.exists():
                continue
            model, meta = load_model(model_file)
            data = load_dataset(eval_file, num_classes=model.head.width if model.task == "classification" else None)
            cfg = TrainConfig(encoder=model.encoder.config)
            probe = model_sharpness(model, data, cfg, radius, k, int(meta.get("seed", 0)))
            rows.append([path.parent.name, radius, k, probe["mean"], probe["max"]])
        _write_csv(out / "sharpness.csv", ["run", "radius", "k", "mean_increase", "max_increase"], rows)
        print(f"sharpness rows: {len(rows)}")
    print(f"wrote tables to {out}")
    return EXIT_OK


def _parse_sharpness(text):
    try:
        radius, k = text.split(",")
        return float(radius), int(k)
    except ValueError:
        raise ConfigError("--sharpness takes RADIUS,K") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ----------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="matchtune", description="In-batch matching fine-tuning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="YAML file with a dataset spec (or a 'dataset' section)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run repeated seeded training runs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--seed", type=int, help="override base_seed")
    p.add_argument("--repeat", type=int)
    p.add_argument("--match-at-eval", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a dataset file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report path (default: next to the model)")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--match-at-eval", action="store_true")
    p.add_argument("--attack", action="store_true", help="also report robust accuracy")
    p.add_argument("--attack-kind", choices=("fgsm", "pgd"), default="fgsm")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--step-size", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid search over config parameters")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="dotted key, e.g. train.temperature=1,2,3")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeat", type=int)
    p.add_argument("--match-at-eval", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="export mass, loss and sharpness tables")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--sharpness", metavar="RADIUS,K")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MatchTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
