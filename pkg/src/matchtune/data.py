"""Synthetic datasets, corruption protocols and the line-delimited dataset format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ModeError, ParameterError, ParseError


@dataclass(frozen=True)
class Instance:
    payload: tuple
    label: float
    group: Optional[int] = None
    tokens: bool = False


class Dataset:
    """Immutable, array-backed collection of instances.

    Dense payloads live in ``features`` (N x D).  Token payloads are stored
    right-padded with zeros in ``tokens`` (N x Lmax) alongside ``lengths``.
    Classification labels are int64, regression labels float64.
    """

    def __init__(self, labels, features=None, tokens=None, lengths=None, groups=None, num_classes=None):
        labels = np.asarray(labels)
        if labels.dtype.kind in "iub":
            labels = labels.astype(np.int64)
        else:
            labels = labels.astype(np.float64)
        n = labels.shape[0]
        if features is not None:
            features = np.asarray(features, dtype=np.float64).reshape(n, -1)
        if tokens is not None:
            tokens = np.asarray(tokens, dtype=np.int64).reshape(n, -1)
            lengths = np.asarray(lengths, dtype=np.int64)
        if groups is not None:
            groups = np.asarray(groups, dtype=np.int64)
        for arr in (features, tokens, lengths, groups):
            if arr is not None and arr.shape[0] != n:
                raise DataError("dataset arrays disagree on instance count")
        for arr in (labels, features, tokens, lengths, groups):
            if arr is not None:
                arr.setflags(write=False)
        self.labels = labels
        self.features = features
        self.tokens = tokens
        self.lengths = lengths
        self.groups = groups
        self._num_classes = num_classes

    # -- basic protocol ------------------------------------------------------
    def __len__(self):
        return int(self.labels.shape[0])

    def __getitem__(self, i):
        label = self.labels[i].item()
        group = None if self.groups is None else int(self.groups[i])
        if self.tokens is not None:
            payload = tuple(int(t) for t in self.tokens[i, : self.lengths[i]])
            return Instance(payload, label, group, tokens=True)
        payload = tuple(float(v) for v in self.features[i]) if self.features is not None else ()
        return Instance(payload, label, group, tokens=False)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, Dataset) or len(self) != len(other):
            return NotImplemented if not isinstance(other, Dataset) else False
        return all(a == b for a, b in zip(self, other))

    def __repr__(self):
        return f"Dataset(n={len(self)}, kind={self.kind}, task={self.task})"

    # -- descriptors ---------------------------------------------------------
    @property
    def kind(self):
        if self.tokens is not None:
            return "tokens"
        if self.features is not None:
            return "dense"
        return "empty"

    @property
    def task(self):
        return "regression" if self.labels.dtype.kind == "f" else "classification"

    @property
    def is_classification(self):
        return self.task == "classification"

    @property
    def num_classes(self):
        if self._num_classes is not None:
            return self._num_classes
        if not self.is_classification:
            return 1
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def feature_dim(self):
        return None if self.features is None else self.features.shape[1]

    @property
    def max_token(self):
        if self.tokens is None or len(self) == 0:
            return -1
        return int(max(self.tokens[i, : self.lengths[i]].max(initial=-1) for i in range(len(self))))

    @property
    def num_groups(self):
        if self.groups is None or len(self) == 0:
            return 0
        return int(self.groups.max()) + 1

    def group_counts(self):
        if self.groups is None:
            return {}
        ids, counts = np.unique(self.groups, return_counts=True)
        return {int(g): int(c) for g, c in zip(ids, counts)}

    # -- derivation ----------------------------------------------------------
    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        tokens = lengths = None
        if self.tokens is not None:
            lengths = self.lengths[idx]
            width = max(int(lengths.max()), 1) if idx.size else 1
            tokens = self.tokens[idx, :width]
        return Dataset(
            self.labels[idx],
            features=None if self.features is None else self.features[idx],
            tokens=tokens,
            lengths=lengths,
            groups=None if self.groups is None else self.groups[idx],
            num_classes=self._num_classes,
        )

    def with_labels(self, labels):
        return Dataset(
            labels,
            features=self.features,
            tokens=self.tokens,
            lengths=self.lengths,
            groups=self.groups,
            num_classes=self._num_classes,
        )

    @classmethod
    def from_instances(cls, instances, num_classes=None):
        instances = list(instances)
        if not instances:
            return cls(np.zeros(0, dtype=np.int64), num_classes=num_classes)
        is_tokens = instances[0].tokens
        if any(inst.tokens != is_tokens for inst in instances):
            raise DataError("cannot mix dense and token payloads in one dataset")
        discrete = all(isinstance(inst.label, (int, np.integer)) and not isinstance(inst.label, bool) for inst in instances)
        labels = np.array([inst.label for inst in instances], dtype=np.int64 if discrete else np.float64)
        has_groups = [inst.group is not None for inst in instances]
        if any(has_groups) and not all(has_groups):
            raise DataError("either every instance carries a group id or none does")
        groups = np.array([inst.group for inst in instances], dtype=np.int64) if all(has_groups) else None
        if is_tokens:
            lengths = np.array([len(inst.payload) for inst in instances], dtype=np.int64)
            tokens = np.zeros((len(instances), max(int(lengths.max()), 1)), dtype=np.int64)
            for i, inst in enumerate(instances):
                tokens[i, : len(inst.payload)] = inst.payload
            return cls(labels, tokens=tokens, lengths=lengths, groups=groups, num_classes=num_classes)
        dims = {len(inst.payload) for inst in instances}
        if len(dims) != 1:
            raise DataError(f"dense payloads have inconsistent dimensions {sorted(dims)}")
        features = np.array([inst.payload for inst in instances], dtype=np.float64)
        return cls(labels, features=features, groups=groups, num_classes=num_classes)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian"
    num_classes: int = 2
    num_instances: int = 200
    dim: int = 16
    vocab: int = 64
    seq_len: int = 8
    separation: float = 4.0
    rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "tokens"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.num_classes < 1 or self.num_instances < 1:
            raise ConfigError("class and instance counts must be >= 1")
        if self.dim < 1 or self.seq_len < 1:
            raise ConfigError("dim and seq_len must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {self.rho}")
        if self.separation < 0:
            raise ParameterError("separation must be non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


def generate(spec):
    if spec.kind == "gaussian":
        return gen_gaussian_clusters(spec)
    return gen_token_task(spec)


def _balanced_labels(rng, n, k):
    return rng.permutation(np.arange(n) % k)


def cluster_means(spec):
    """Class means on the sphere of radius ``separation``.

    When ``num_classes <= dim`` the means are the vertices of a randomly
    rotated regular simplex (antipodal for two classes), which maximises the
    smallest pairwise distance.  Otherwise directions are drawn at random.
    """
    rng = np.random.default_rng([spec.seed, 0])
    k, d = spec.num_classes, spec.dim
    if k <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        simplex = np.eye(k) - 1.0 / k
        simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
        dirs = simplex @ q[:, :k].T
    else:
        dirs = rng.standard_normal((k, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.separation * dirs


def gen_gaussian_clusters(spec):
    if spec.num_classes < 2:
        raise ConfigError("gaussian clusters need at least 2 classes")
    means = cluster_means(spec)
    rng = np.random.default_rng([spec.seed, 1])
    labels = _balanced_labels(rng, spec.num_instances, spec.num_classes)
    x = means[labels] + rng.standard_normal((spec.num_instances, spec.dim))
    return Dataset(labels, features=x, num_classes=spec.num_classes)


@dataclass(frozen=True)
class TokenLayout:
    """Vocabulary partition of the token task.

    Token 0 is the spurious token, ``signal`` holds one id pool per class and
    the remaining ids are fillers.
    """

    spurious: int
    signal: tuple
    filler: tuple


def token_layout(vocab, num_classes):
    if vocab < 4:
        raise ConfigError(f"token task needs vocab >= 4, got {vocab}")
    per_class = max(1, (vocab - 1) // (2 * num_classes))
    start = 1
    pools = []
    for _ in range(num_classes):
        pools.append(tuple(range(start, start + per_class)))
        start += per_class
    if start >= vocab:
        raise ConfigError(f"vocab {vocab} too small for {num_classes} classes")
    return TokenLayout(0, tuple(pools), tuple(range(start, vocab)))


def gen_token_task(spec):
    """Sequences with one label-determining token and a spurious cue.

    The cue is present with probability ``rho`` for the last class and
    ``1 - rho`` for every other class.  Group id is ``2 * label + cue``.
    """
    k, L = spec.num_classes, spec.seq_len
    if L < 2:
        raise ConfigError("token task needs seq_len >= 2")
    layout = token_layout(spec.vocab, k)
    rng = np.random.default_rng([spec.seed, 2])
    n = spec.num_instances
    labels = _balanced_labels(rng, n, k)
    p_cue = np.where(labels == k - 1, spec.rho, 1.0 - spec.rho)
    cue = rng.random(n) < p_cue
    filler = np.asarray(layout.filler)
    tokens = filler[rng.integers(0, filler.size, size=(n, L))]
    pos = np.argsort(rng.random((n, L)), axis=1)[:, :2]
    rows = np.arange(n)
    pool_size = len(layout.signal[0])
    signal = np.asarray(layout.signal)[labels, rng.integers(0, pool_size, size=n)]
    tokens[rows, pos[:, 0]] = signal
    tokens[rows[cue], pos[cue, 1]] = layout.spurious
    groups = 2 * labels + cue.astype(np.int64)
    return Dataset(labels, tokens=tokens, lengths=np.full(n, L), groups=groups, num_classes=k)


# ----------------------------------------------------------------------------
# corruption protocols


def _require_discrete(dataset, what):
    if not dataset.is_classification:
        raise ModeError(f"{what} requires discrete labels")


def inject_label_noise(dataset, ratio, seed):
    """Flip exactly ``floor(ratio * N)`` labels to a uniformly drawn other class."""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"noise ratio must lie in [0, 1], got {ratio}")
    _require_discrete(dataset, "label noise")
    n = len(dataset)
    m = math.floor(ratio * n + 1e-9)
    k = dataset.num_classes
    if m == 0:
        return dataset
    if k < 2:
        raise DataError("label noise needs at least two classes")
    rng = np.random.default_rng([seed, 3])
    idx = rng.choice(n, size=m, replace=False)
    labels = dataset.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, k, size=m)) % k
    return dataset.with_labels(labels)


def reduce_minority(dataset, target_label, keep_ratio, seed):
    """Keep a random ``floor(keep_ratio * count)`` subset of one class."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ParameterError(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    _require_discrete(dataset, "minority reduction")
    target = np.flatnonzero(dataset.labels == target_label)
    if target.size == 0:
        raise DataError(f"label {target_label} does not occur in the dataset")
    rng = np.random.default_rng([seed, 4])
    keep = rng.choice(target, size=math.floor(keep_ratio * target.size + 1e-9), replace=False)
    rest = np.flatnonzero(dataset.labels != target_label)
    order = rng.permutation(np.concatenate([rest, keep]))
    return dataset.subset(order)


# ----------------------------------------------------------------------------
# file format: one JSON object per line


def _record(inst):
    rec = {"payload": list(inst.payload), "label": inst.label}
    if inst.tokens:
        rec["tokens"] = True
    if inst.group is not None:
        rec["group"] = inst.group
    return rec


def save_dataset(dataset, path):
    path = Path(path)
    with path.open("w") as fh:
        for inst in dataset:
            fh.write(json.dumps(_record(inst)) + "\n")


def _parse_record(line, lineno):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    for key in ("payload", "label"):
        if key not in rec:
            raise ParseError(f"missing field {key!r}", lineno)
    unknown = set(rec) - {"payload", "label", "group", "tokens"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", lineno)
    payload, label = rec["payload"], rec["label"]
    is_tokens = bool(rec.get("tokens", False))
    if not isinstance(payload, list) or not payload:
        raise ParseError("payload must be a non-empty list", lineno)
    if is_tokens:
        if not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in payload):
            raise ParseError("token payload must hold non-negative integers", lineno)
    elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in payload):
        raise ParseError("dense payload must hold numbers", lineno)
    if isinstance(label, bool) or not isinstance(label, (int, float)):
        raise ParseError("label must be a number", lineno)
    if isinstance(label, int) and label < 0:
        raise ParseError("discrete label must be >= 0", lineno)
    group = rec.get("group")
    if group is not None and (not isinstance(group, int) or isinstance(group, bool) or group < 0):
        raise ParseError("group must be a non-negative integer", lineno)
    values = tuple(payload) if is_tokens else tuple(float(v) for v in payload)
    return Instance(values, label, group, is_tokens)


def load_dataset(path, num_classes=None):
    instances = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            instances.append(_parse_record(line, lineno))
    try:
        return Dataset.from_instances(instances, num_classes=num_classes)
    except DataError as exc:
        raise ParseError(str(exc)) from None
