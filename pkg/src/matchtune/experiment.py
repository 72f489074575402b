"""Experiment configs, seeded multi-run execution and run summaries."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .attacks import AttackConfig, robust_accuracy
from .data import DatasetSpec, generate, inject_label_noise, load_dataset, reduce_minority, save_dataset
from .errors import ConfigError, DivergenceError, MatchTuneError, ParameterError
from .training import TrainConfig, fit, save_model

log = logging.getLogger(__name__)

TOP_LEVEL_KEYS = {
    "name",
    "output_dir",
    "repeat",
    "base_seed",
    "resample_data",
    "metric",
    "dataset",
    "eval_instances",
    "data",
    "corruption",
    "train",
    "attack",
    "grid",
}


@dataclass(frozen=True)
class CorruptionConfig:
    noise_ratio: float = 0.0
    minority_label: Optional[int] = None
    keep_ratio: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ParameterError("noise_ratio must lie in [0, 1]")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ParameterError("keep_ratio must lie in (0, 1]")

    def apply(self, dataset, seed):
        if self.minority_label is not None and self.keep_ratio < 1.0:
            dataset = reduce_minority(dataset, self.minority_label, self.keep_ratio, seed)
        if self.noise_ratio > 0:
            dataset = inject_label_noise(dataset, self.noise_ratio, seed)
        return dataset


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    name: str = "run"
    output_dir: str = "runs"
    repeat: int = 1
    base_seed: int = 0
    resample_data: bool = False
    metric: Optional[str] = None
    dataset: Optional[DatasetSpec] = None
    eval_instances: int = 0
    data: Optional[dict] = None
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    attack: Optional[AttackConfig] = None
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if (self.dataset is None) == (self.data is None):
            raise ConfigError("give exactly one of 'dataset' (generator spec) or 'data' (file paths)")
        if self.data is not None:
            unknown = set(self.data) - {"train", "eval"}
            if unknown or "train" not in self.data:
                raise ConfigError("'data' needs a 'train' path and optionally an 'eval' path")
        if self.eval_instances < 0:
            raise ConfigError("eval_instances must be >= 0")

    @property
    def primary_metric(self):
        if self.metric:
            return self.metric
        return "spearman" if self.train.loss == "mse" else "accuracy"

    def to_dict(self):
        d = {
            "name": self.name,
            "output_dir": self.output_dir,
            "repeat": self.repeat,
            "base_seed": self.base_seed,
            "resample_data": self.resample_data,
            "metric": self.metric,
            "dataset": None if self.dataset is None else asdict(self.dataset),
            "eval_instances": self.eval_instances,
            "data": self.data,
            "corruption": asdict(self.corruption),
            "train": self.train.to_dict(),
            "attack": None if self.attack is None else asdict(self.attack),
            "grid": self.grid,
        }
        return d

    def config_hash(self):
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("grid")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_dir(self):
        return Path(self.output_dir) / f"{self.name}-{self.config_hash()[:12]}"


def _section(d, key, cls):
    value = d.get(key)
    if value is None:
        return None
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return cls.from_dict(value) if hasattr(cls, "from_dict") else cls(**value)


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be a mapping")
    unknown = set(d) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "train" not in d:
        raise ConfigError("config needs a 'train' section")
    corruption = d.get("corruption") or {}
    try:
        corruption = CorruptionConfig(**corruption)
    except TypeError as exc:
        raise ConfigError(f"corruption: {exc}") from None
    grid = d.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid must map dotted parameter names to value lists")
    try:
        return ExperimentConfig(
            train=TrainConfig.from_dict(d["train"]),
            name=str(d.get("name", "run")),
            output_dir=str(d.get("output_dir", "runs")),
            repeat=int(d.get("repeat", 1)),
            base_seed=int(d.get("base_seed", 0)),
            resample_data=bool(d.get("resample_data", False)),
            metric=d.get("metric"),
            dataset=_section(d, "dataset", DatasetSpec),
            eval_instances=int(d.get("eval_instances", 0)),
            data=d.get("data"),
            corruption=corruption,
            attack=_section(d, "attack", AttackConfig),
            grid=grid,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return config_from_dict(raw or {})


# ----------------------------------------------------------------------------
# data preparation


def load_data(cfg, index=0):
    """Training and evaluation sets before corruption."""
    if cfg.data is not None:
        train = load_dataset(cfg.data["train"])
        eval_set = load_dataset(cfg.data["eval"]) if cfg.data.get("eval") else None
        return train, eval_set
    spec = cfg.dataset
    if cfg.resample_data:
        spec = replace(spec, seed=spec.seed + index)
    total = spec.num_instances + cfg.eval_instances
    full = generate(replace(spec, num_instances=total))
    train = full.subset(np.arange(spec.num_instances))
    eval_set = full.subset(np.arange(spec.num_instances, total)) if cfg.eval_instances else None
    return train, eval_set


def seeded_train_config(cfg, seed):
    return replace(cfg.train, seed=seed, encoder=replace(cfg.train.encoder, seed=seed))


# ----------------------------------------------------------------------------
# running


def run_single(cfg, index, seed_dir=None):
    """One seeded run: data, corruption, training, evaluation, optional attack."""
    seed = cfg.base_seed + index
    train_cfg = seeded_train_config(cfg, seed)
    train, eval_set = load_data(cfg, index)
    train = cfg.corruption.apply(train, seed)
    result = {"seed": seed, "status": "ok", "report": None, "epoch_seconds": []}
    log_path = None
    if seed_dir is not None:
        seed_dir = Path(seed_dir)
        seed_dir.mkdir(parents=True, exist_ok=True)
        log_path = seed_dir / "metrics.jsonl"
        if eval_set is not None:
            save_dataset(eval_set, seed_dir / "eval.jsonl")
    try:
        fitted = fit(train, eval_set, train_cfg, log_path=log_path)
    except DivergenceError as exc:
        result.update(status="diverged", error=str(exc), step=exc.step)
        return result, None
    result["epoch_seconds"] = fitted.epoch_seconds
    report = fitted.eval_reports[-1] if fitted.eval_reports else None
    if report is not None and cfg.attack is not None and fitted.model.task == "classification":
        report.robust_accuracy, _ = robust_accuracy(fitted.model, eval_set, cfg.attack, train_cfg.eval_batch_size)
    result["report"] = None if report is None else report.as_dict()
    if seed_dir is not None:
        save_model(seed_dir / "model.bin", fitted.model, {"config_hash": cfg.config_hash(), "seed": seed})
    return result, fitted


def _scalars(report):
    out = {}
    for key, value in report.items():
        if isinstance(value, bool) or value is None:
            continue
        if isinstance(value, (int, float)) and key != "n":
            out[key] = float(value)
        elif isinstance(value, dict):
            prefix = "class" if key == "per_class" else "group"
            for k, v in value.items():
                out[f"{prefix}_{k}_accuracy"] = float(v)
    return out


def summarize(cfg, runs):
    """Mean and max of every numeric report field across successful runs."""
    ok = [r for r in runs if r["status"] == "ok" and r["report"] is not None]
    values = {}
    for r in ok:
        for key, v in _scalars(r["report"]).items():
            values.setdefault(key, []).append(v)
    epoch_times = [t for r in runs for t in r.get("epoch_seconds", [])]
    return {
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "metric": cfg.primary_metric,
        "repeat": cfg.repeat,
        "seeds": [r["seed"] for r in runs],
        "failed": sum(r["status"] != "ok" for r in runs),
        "runs": runs,
        "mean": {k: float(np.mean(v)) for k, v in sorted(values.items())},
        "max": {k: float(np.max(v)) for k, v in sorted(values.items())},
        "timing": {
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "epoch_seconds_mean": float(np.mean(epoch_times)) if epoch_times else None,
            "epoch_seconds_per_run": [r.get("epoch_seconds", []) for r in runs],
        },
    }


def strip_timing(summary):
    """Summary without wall-clock fields, for determinism comparisons."""
    s = copy.deepcopy(summary)
    s.pop("timing", None)
    for r in s.get("runs", []):
        r.pop("epoch_seconds", None)
    return s


def run_experiment(cfg, force=False):
    """Run ``cfg.repeat`` seeded runs into the config's own run directory."""
    run_dir = cfg.run_dir()
    if run_dir.exists() and not force:
        raise ConfigError(f"{run_dir} already exists (use --force to overwrite)")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    runs = []
    for i in range(cfg.repeat):
        seed = cfg.base_seed + i
        log.info("run %s seed %d", cfg.name, seed)
        result, _ = run_single(cfg, i, run_dir / f"seed-{seed}")
        runs.append(result)
    summary = summarize(cfg, runs)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return run_dir, summary


# ----------------------------------------------------------------------------
# sweeps


def _set_dotted(d, dotted, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown grid parameter {dotted!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown grid parameter {dotted!r}")
    node[keys[-1]] = value


def expand_grid(cfg, grid=None):
    """Every point of the Cartesian product as ``(assignment, ExperimentConfig)``.

    All points are validated before anything runs.
    """
    grid = dict(cfg.grid if grid is None else grid)
    for key, values in grid.items():
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"grid parameter {key!r} needs a non-empty list of values")
    base = cfg.to_dict()
    base["grid"] = {}
    keys = sorted(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        d = copy.deepcopy(base)
        assignment = dict(zip(keys, combo))
        for k, v in assignment.items():
            _set_dotted(d, k, v)
        d = {k: v for k, v in d.items() if v is not None}
        point = config_from_dict(d)
        if assignment:
            suffix = "-".join(f"{k.split('.')[-1]}={v}" for k, v in assignment.items())
            point = replace(point, name=f"{cfg.name}-{suffix}")
        points.append((assignment, point))
    return points


def _sweep_worker(args):
    assignment, point, force = args
    try:
        run_dir, summary = run_experiment(point, force=force)
    except MatchTuneError as exc:
        return assignment, point.name, None, str(exc)
    return assignment, point.name, summary, str(run_dir)


def run_sweep(cfg, grid=None, jobs=1, force=False):
    points = expand_grid(cfg, grid)
    tasks = [(a, p, force) for a, p in points]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, tasks))
    else:
        results = [_sweep_worker(t) for t in tasks]
    metric = cfg.primary_metric
    rows = []
    for assignment, name, summary, where in results:
        row = {"name": name, **assignment}
        if summary is None:
            row.update(status="error", error=where, mean=None, max=None, failed=cfg.repeat)
        else:
            row.update(
                status="ok" if summary["failed"] == 0 else "partial",
                config_hash=summary["config_hash"],
                mean=summary["mean"].get(metric),
                max=summary["max"].get(metric),
                failed=summary["failed"],
                run_dir=where,
            )
        rows.append(row)
    rows.sort(key=lambda r: (r["mean"] is None, -(r["mean"] or 0.0), r["name"]))
    return rows
