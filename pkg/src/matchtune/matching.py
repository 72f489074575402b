"""In-batch matching: similarity matrix, label masks, composite representations.

For a batch of representations ``H`` (n x d) the matching matrix is the row
softmax of ``H @ H.T / temperature``.  Each instance is then replaced by the
convex combination ``M @ H`` of the whole batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ModeError, NumericError

RENORM_FLOOR = 1e-12


class MatchMode(str, enum.Enum):
    VANILLA = "vanilla"
    FULL = "full"
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ModeError(f"unknown match mode {value!r} (expected one of {choices})") from None

    @property
    def needs_labels(self):
        return self in (MatchMode.POSITIVE, MatchMode.NEGATIVE)


@dataclass
class MatchMatrix:
    values: Tensor
    temperature: float

    @property
    def n(self):
        return self.values.shape[0]

    def numpy(self):
        return self.values.data


@dataclass(frozen=True)
class MassDiagnostics:
    self_mass: float
    positive_mass: float
    negative_mass: float
    step: int = -1

    def as_dict(self):
        return {
            "self_mass": self.self_mass,
            "positive_mass": self.positive_mass,
            "negative_mass": self.negative_mass,
        }


def compute_match_matrix(H, temperature=1.0, stop_grad=False):
    """Row-stochastic similarity matrix of the rows of ``H``.

    With ``stop_grad`` the returned matrix is detached from ``H`` so that
    gradients only reach the encoder through the composed values.
    """
    if H.ndim != 2 or H.shape[0] < 1:
        raise DimensionError(f"representations must be n x d with n >= 1, got shape {H.shape}")
    if not np.all(np.isfinite(H.data)):
        raise NumericError("non-finite representations in matching matrix")
    M = ad.row_softmax(ad.matmul(H, H.T), temperature)
    if stop_grad:
        M = M.detach()
    return MatchMatrix(M, float(temperature))


def _discrete_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.dtype.kind == "f":
        if not np.all(labels == np.round(labels)):
            raise ModeError("label masks require discrete labels")
        labels = labels.astype(np.int64)
    elif labels.dtype.kind not in "iub":
        raise ModeError("label masks require discrete labels")
    return labels


def mask_matrix(labels, mode):
    """0/1 matrix of entries kept by ``mode``; the diagonal is always kept."""
    mode = MatchMode.parse(mode)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if not mode.needs_labels:
        return np.ones((n, n))
    same = labels[:, None] == labels[None, :]
    keep = same if mode is MatchMode.POSITIVE else ~same
    keep = keep | np.eye(n, dtype=bool)
    return keep.astype(np.float64)


def apply_mask(M, labels, mode, renormalize=True):
    """Restrict ``M`` to same-label (positive) or self + other-label (negative) entries.

    Vanilla and Full modes return ``M`` untouched.  With ``renormalize`` every
    row is rescaled to sum to one; a row whose surviving mass falls below
    1e-12 becomes the one-hot self row.
    """
    mode = MatchMode.parse(mode)
    if not mode.needs_labels:
        return M
    labels = _discrete_labels(labels, M.n)
    masked = M.values * Tensor(mask_matrix(labels, mode))
    if renormalize:
        totals = masked.data.sum(axis=1, keepdims=True)
        dead = totals < RENORM_FLOOR
        if np.any(dead):
            alive = Tensor((~dead).astype(np.float64))
            safe = ad.add(masked.sum(axis=1, keepdims=True), Tensor(dead.astype(np.float64)))
            fallback = np.eye(M.n) * dead
            masked = (masked / safe) * alive + Tensor(fallback)
        else:
            masked = masked / masked.sum(axis=1, keepdims=True)
    return MatchMatrix(masked, M.temperature)


def compose(M, H):
    """Composite representations ``Z = M @ H``."""
    values = M.values if isinstance(M, MatchMatrix) else ad.as_tensor(M)
    if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[1] != H.shape[0]:
        raise DimensionError(f"compose: incompatible shapes {values.shape} and {H.shape}")
    return ad.matmul(values, H)


def mass_diagnostics(M, labels, step=-1):
    """Average matching mass on self, same-label peers and other-label instances."""
    values = M.numpy() if isinstance(M, MatchMatrix) else np.asarray(M)
    labels = _discrete_labels(labels, values.shape[0])
    same = labels[:, None] == labels[None, :]
    diag = np.diagonal(values)
    self_mass = float(diag.mean())
    positive_mass = float(((values * same).sum(axis=1) - diag).mean())
    negative_mass = float((values * ~same).sum(axis=1).mean())
    return MassDiagnostics(self_mass, positive_mass, negative_mass, step)


def identity_diagnostics(step=-1):
    return MassDiagnostics(1.0, 0.0, 0.0, step)
