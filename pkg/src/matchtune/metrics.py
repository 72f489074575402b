"""Classification/regression metrics and group-level reports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, DimensionError, ModeError


def _pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DimensionError(f"predictions {preds.shape} and labels {labels.shape} differ")
    return preds, labels


def _confusion(preds, labels):
    preds, labels = _pair(preds, labels)
    values = np.union1d(np.unique(preds), np.unique(labels))
    if not np.all(np.isin(values, (0, 1))):
        raise ModeError("f1 and matthews are defined for binary labels {0, 1}")
    p, y = preds == 1, labels == 1
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    return tp, fp, fn, tn


def accuracy(preds, labels):
    preds, labels = _pair(preds, labels)
    if preds.size == 0:
        raise DataError("accuracy of an empty set")
    return float(np.mean(preds == labels))


def f1(preds, labels):
    """Binary F1 of class 1; 0 when there are no positive predictions or labels."""
    tp, fp, fn, _ = _confusion(preds, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def matthews(preds, labels):
    """Binary Matthews correlation; 0 when any confusion marginal is empty."""
    tp, fp, fn, tn = _confusion(preds, labels)
    marginals = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if marginals == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(marginals)


def spearman_with_flag(pred, target):
    """Spearman correlation and a flag set when either input is constant."""
    pred, target = _pair(np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64))
    if pred.size < 2:
        raise DataError("spearman needs at least two values")
    rp = rankdata(pred) - (pred.size + 1) / 2.0
    rt = rankdata(target) - (target.size + 1) / 2.0
    denom = math.sqrt(float(rp @ rp) * float(rt @ rt))
    if denom == 0.0:
        return 0.0, True
    return float(rp @ rt) / denom, False


def spearman(pred, target):
    return spearman_with_flag(pred, target)[0]


@dataclass
class GroupReport:
    per_group: dict
    worst_group_accuracy: float


def group_report(preds, labels, groups):
    preds, labels = _pair(preds, labels)
    groups = np.asarray(groups)
    if groups.shape != preds.shape:
        raise DimensionError(f"groups {groups.shape} and predictions {preds.shape} differ")
    if groups.size == 0:
        raise DataError("no groups to report on")
    per_group = {}
    for g in np.unique(groups):
        sel = groups == g
        per_group[int(g)] = float(np.mean(preds[sel] == labels[sel]))
    return GroupReport(per_group, min(per_group.values()))


def per_class_accuracy(preds, labels):
    preds, labels = _pair(preds, labels)
    return {int(c): float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)}


@dataclass
class EvalReport:
    n: int
    accuracy: Optional[float] = None
    matthews: Optional[float] = None
    f1: Optional[float] = None
    spearman: Optional[float] = None
    spearman_degenerate: Optional[bool] = None
    per_class: dict = field(default_factory=dict)
    per_group: dict = field(default_factory=dict)
    worst_group_accuracy: Optional[float] = None
    robust_accuracy: Optional[float] = None

    def as_dict(self):
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["per_group"] = {str(k): v for k, v in self.per_group.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_class"] = {int(k): v for k, v in d.get("per_class", {}).items()}
        d["per_group"] = {int(k): v for k, v in d.get("per_group", {}).items()}
        return cls(**d)

    def scalars(self):
        """Flat mapping of every numeric field, per-class/group entries included."""
        out = {}
        for key in ("accuracy", "matthews", "f1", "spearman", "worst_group_accuracy", "robust_accuracy"):
            value = getattr(self, key)
            if value is not None:
                out[key] = float(value)
        for c, v in self.per_class.items():
            out[f"class_{c}_accuracy"] = v
        for g, v in self.per_group.items():
            out[f"group_{g}_accuracy"] = v
        return out


def evaluate(preds, labels, groups=None, task="classification"):
    preds, labels = _pair(preds, labels)
    report = EvalReport(n=int(labels.size))
    if labels.size == 0:
        return report
    if task == "regression":
        if labels.size >= 2:
            report.spearman, report.spearman_degenerate = spearman_with_flag(preds, labels)
        return report
    report.accuracy = accuracy(preds, labels)
    report.per_class = per_class_accuracy(preds, labels)
    if np.all(np.isin(np.union1d(preds, labels), (0, 1))):
        report.f1 = f1(preds, labels)
        report.matthews = matthews(preds, labels)
    if groups is not None:
        gr = group_report(preds, labels, groups)
        report.per_group = gr.per_group
        report.worst_group_accuracy = gr.worst_group_accuracy
    return report
