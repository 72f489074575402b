"""FGSM and PGD attacks in embedding space.

The perturbed quantity is the output of the embedding layer: token
embeddings for the token encoders, the dense feature vector for the mlp.
Predictions always use raw representations (no in-batch matching), so a
robust accuracy does not depend on how the evaluation set is batched.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import embed, encode_embedded
from .errors import ConfigError, ParameterError
from .metrics import accuracy


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.1
    steps: int = 1
    step_size: Optional[float] = None
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.step_size is not None and self.step_size < 0:
            raise ParameterError("step size must be non-negative")

    @property
    def alpha(self):
        return self.epsilon / self.steps if self.step_size is None else self.step_size

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackResult:
    clean: np.ndarray
    perturbed: np.ndarray
    clean_predictions: np.ndarray
    robust_predictions: np.ndarray
    losses: list
    delta: np.ndarray = None  # perturbation added to ``clean``; |delta| <= eps exactly


def _loss_and_grad(model, emb, batch):
    leaf = Tensor(emb, requires_grad=True)
    out = model.head(encode_embedded(model.encoder, leaf, batch))
    if model.task == "regression":
        out = out.reshape(-1)
        loss = ad.loss_mse(out, batch.labels)
    else:
        loss = ad.loss_ce(out, batch.labels)
    ad.backward(loss)
    return loss.item(), leaf.grad, out.data


def _predictions(out, task):
    return out if task == "regression" else out.argmax(axis=1)


def attack_batch(model, batch, attack):
    """Perturb the embeddings of ``batch`` to increase the task loss.

    fgsm: ``e + eps * sign(grad)``.  pgd: ``steps`` signed ascent steps of
    size ``alpha``, each projected back onto the l-inf ball of radius
    ``eps`` around the clean embeddings.
    """
    clean = np.asarray(embed(model.encoder, batch), dtype=np.float64)
    loss, grad, out = _loss_and_grad(model, clean, batch)
    clean_preds = _predictions(out, model.task)
    losses = [loss]
    eps = attack.epsilon
    if attack.kind == "fgsm":
        delta = eps * np.sign(grad)
    else:
        delta = np.zeros_like(clean)
        if attack.random_start:
            rng = np.random.default_rng(attack.seed)
            delta = rng.uniform(-eps, eps, size=clean.shape)
            loss, grad, _ = _loss_and_grad(model, clean + delta, batch)
            losses[0] = loss
        for _ in range(attack.steps):
            delta = np.clip(delta + attack.alpha * np.sign(grad), -eps, eps)
            loss, grad, _ = _loss_and_grad(model, clean + delta, batch)
            losses.append(loss)
    perturbed = clean + delta
    loss, _, out = _loss_and_grad(model, perturbed, batch)
    if attack.kind == "fgsm":
        losses.append(loss)
    return AttackResult(clean, perturbed, clean_preds, _predictions(out, model.task), losses, delta)


def robust_accuracy(model, dataset, attack, batch_size=256):
    """Accuracy on attacked embeddings, together with clean accuracy."""
    robust, clean = [], []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.subset(np.arange(start, min(start + batch_size, len(dataset))))
        res = attack_batch(model, batch, attack)
        robust.append(res.robust_predictions)
        clean.append(res.clean_predictions)
    labels = dataset.labels
    return accuracy(np.concatenate(robust), labels), accuracy(np.concatenate(clean), labels)
