"""Training loop for vanilla and match-tuned fine-tuning.

A step encodes the batch, optionally mixes the representations through the
matching matrix, applies the classifier head and minimises the task loss
(averaged, or GroupDRO-reweighted), plus an optional noise-consistency
penalty on the composite representations.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig, encode, init_encoder, load_params, save_params, EncoderParams
from .errors import ConfigError, DivergenceError, ModeError, NumericError, ParameterError
from .matching import (
    MatchMatrix,
    MatchMode,
    apply_mask,
    compose,
    compute_match_matrix,
    identity_diagnostics,
    mass_diagnostics,
)
from .metrics import evaluate

OBJECTIVES = ("erm", "groupdro")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    match_mode: str = "full"
    temperature: float = 1.0
    renormalize: bool = True
    loss: str = "ce"
    objective: str = "erm"
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 3
    warmup_ratio: float = 0.1
    clip_norm: Optional[float] = 1.0
    seed: int = 0
    groupdro_eta: float = 0.01
    r3f_lambda: float = 0.0
    r3f_sigma: float = 0.0
    r3f_noise: str = "uniform"
    eval_match: bool = False
    stop_grad_match: bool = False
    force_identity: bool = False
    num_classes: Optional[int] = None
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "match_mode", MatchMode.parse(self.match_mode).value)
        if self.loss not in ("ce", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.r3f_noise not in ("uniform", "normal"):
            raise ConfigError(f"unknown r3f noise {self.r3f_noise!r}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ParameterError(f"warmup ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.lr < 0 or not self.temperature > 0:
            raise ParameterError("learning rate must be >= 0 and temperature > 0")
        if self.groupdro_eta < 0:
            raise ParameterError("groupdro_eta must be non-negative")
        if self.r3f_lambda < 0 or self.r3f_sigma < 0:
            raise ParameterError("r3f weight and noise scale must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive or null")
        if self.loss == "mse" and MatchMode(self.match_mode).needs_labels:
            raise ModeError("positive/negative masks require discrete labels")

    @property
    def mode(self):
        return MatchMode(self.match_mode)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        enc = d.pop("encoder", {})
        if not isinstance(enc, EncoderConfig):
            enc = EncoderConfig.from_dict(enc)
        return cls(encoder=enc, **d)

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


# ----------------------------------------------------------------------------
# model


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rep_dim, width, seed):
        rng = np.random.default_rng([seed, 7])
        w = rng.standard_normal((rep_dim, width)) / math.sqrt(rep_dim)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(width), requires_grad=True))

    @property
    def width(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, Z):
        return Z @ self.weight + self.bias


@dataclass
class Model:
    encoder: EncoderParams
    head: ClassifierHead
    task: str = "classification"

    def parameters(self):
        return self.encoder.parameters() + self.head.parameters()

    def named_arrays(self):
        named = {f"encoder.{k}": t.data for k, t in self.encoder.tensors.items()}
        named["head.weight"] = self.head.weight.data
        named["head.bias"] = self.head.bias.data
        return named

    def snapshot(self):
        return {k: v.copy() for k, v in self.named_arrays().items()}


def init_model(config, num_classes, task="classification"):
    encoder = init_encoder(config.encoder)
    width = num_classes if task == "classification" else 1
    head = ClassifierHead.init(config.encoder.rep_dim, width, config.seed)
    return Model(encoder, head, task)


def save_model(path, model, meta=None):
    header = {"encoder": model.encoder.config.to_dict(), "task": model.task, "head_width": model.head.width}
    header.update(meta or {})
    save_params(path, model.named_arrays(), header)


def load_model(path):
    arrays, meta = load_params(path)
    try:
        cfg = EncoderConfig.from_dict(meta["encoder"])
        encoder = EncoderParams(cfg, {})
        for name, arr in arrays.items():
            if name.startswith("encoder."):
                encoder.tensors[name[len("encoder.") :]] = Tensor(arr, requires_grad=True)
        expected = init_encoder(replace(cfg, init_scale=0.0)).shapes()
        if encoder.shapes() != expected:
            raise ConfigError(f"{path}: encoder tensors do not match configuration")
        head = ClassifierHead(
            Tensor(arrays["head.weight"], requires_grad=True),
            Tensor(arrays["head.bias"], requires_grad=True),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing entry {exc}") from None
    return Model(encoder, head, meta.get("task", "classification")), meta


# ----------------------------------------------------------------------------
# forward pipeline


@dataclass
class ForwardPass:
    H: Tensor
    M: Optional[MatchMatrix]
    Z: Tensor
    out: Tensor


def forward(model, batch, config, training=True, H=None):
    """Encode, optionally match-and-compose, and apply the head.

    Training uses the configured match mode.  Evaluation uses raw
    representations unless ``config.eval_match`` asks for within-batch
    matching (never masked, since labels are unknown at test time).
    """
    if H is None:
        H = encode(model.encoder, batch)
    mode = config.mode
    use_match = mode is not MatchMode.VANILLA if training else config.eval_match
    M = None
    Z = H
    if use_match:
        n = H.shape[0]
        if config.force_identity:
            M = MatchMatrix(Tensor(np.eye(n)), config.temperature)
        else:
            M = compute_match_matrix(H, config.temperature, stop_grad=config.stop_grad_match)
        used = apply_mask(M, batch.labels, mode, config.renormalize) if training else M
        Z = compose(used, H)
    out = model.head(Z)
    if model.task == "regression":
        out = out.reshape(-1)
    return ForwardPass(H, M, Z, out)


def per_instance_loss(model, out, labels):
    if model.task == "regression":
        diff = out - Tensor(np.asarray(labels, dtype=np.float64))
        return diff * diff
    return ad.ce_per_instance(out, labels)


# ----------------------------------------------------------------------------
# schedule, optimisers, clipping


def lr_at(step, total_steps, peak, warmup_ratio):
    """Linear warmup from 0 to ``peak`` then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return peak
    warm = warmup_ratio * total_steps
    if step < warm:
        return peak * step / warm
    return peak * max(total_steps - step, 0) / (total_steps - warm)


class SGD:
    def __init__(self, params, momentum=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= lr * v
            else:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, config):
    if config.optimizer == "sgd":
        return SGD(params, config.momentum)
    return Adam(params, config.beta1, config.beta2, config.adam_eps)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


# ----------------------------------------------------------------------------
# GroupDRO and the noise-consistency penalty


class GroupWeights:
    """Distribution over groups kept on the probability simplex."""

    def __init__(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 1 or q.size == 0 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
            raise ParameterError("group weights must be a non-empty probability vector")
        self.q = q

    @classmethod
    def uniform(cls, num_groups):
        return cls(np.full(num_groups, 1.0 / num_groups))

    def __len__(self):
        return self.q.size


def groupdro_update(per_group_losses, q, eta, present=None):
    """Exponentiated-gradient step on the group weights.

    ``q'_g`` is proportional to ``q_g * exp(eta * L_g)`` for groups present in
    the batch; absent groups keep their unnormalised weight.  Returns the
    robust loss ``sum_g q'_g L_g`` over present groups and the new weights.
    """
    if eta < 0:
        raise ParameterError(f"groupdro step must be non-negative, got {eta}")
    losses = np.asarray(per_group_losses, dtype=np.float64)
    q = q.q if isinstance(q, GroupWeights) else np.asarray(q, dtype=np.float64)
    present = np.ones(losses.size, dtype=bool) if present is None else np.asarray(present, dtype=bool)
    with np.errstate(divide="ignore"):
        logw = np.log(q) + eta * np.where(present, losses, 0.0)
    w = np.exp(logw - logw.max())
    new_q = w / w.sum()
    robust = float(np.sum(np.where(present, new_q * losses, 0.0)))
    return robust, GroupWeights(new_q)


def r3f_penalty(head, Z, sigma, lam, seed=None, noise="uniform", task="classification"):
    """``lam`` times the symmetric KL between predictions on ``Z`` and ``Z + noise``."""
    if task == "regression":
        raise ModeError("noise-consistency penalty is not applicable to regression")
    if sigma < 0 or lam < 0:
        raise ParameterError("sigma and lambda must be non-negative")
    if sigma == 0 or lam == 0:
        return Tensor(0.0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if noise == "uniform":
        eps = rng.uniform(-sigma, sigma, size=Z.shape)
    else:
        eps = rng.normal(0.0, sigma, size=Z.shape)
    lp = ad.log_softmax(head(Z))
    lq = ad.log_softmax(head(Z + Tensor(eps)))
    sym_kl = ((ad.exp(lp) - ad.exp(lq)) * (lp - lq)).sum(axis=1).mean()
    return ad.scale(sym_kl, lam)


# ----------------------------------------------------------------------------
# trainer


@dataclass
class StepResult:
    loss: float
    lr: float
    diagnostics: Optional[object]
    grad_norm: float


class Trainer:
    """Owns the model, optimiser state, group weights and RNG of one run."""

    def __init__(self, model, config, total_steps, num_groups=0):
        self.model = model
        self.config = config
        self.total_steps = total_steps
        self.params = model.parameters()
        self.optimizer = make_optimizer(self.params, config)
        self.rng = np.random.default_rng([config.seed, 11])
        self.step_index = 0
        self.group_weights = None
        if config.objective == "groupdro":
            if num_groups < 1:
                raise ConfigError("groupdro needs group ids in the training data")
            self.group_weights = GroupWeights.uniform(num_groups)

    def batch_loss(self, batch):
        cfg, model = self.config, self.model
        fp = forward(model, batch, cfg, training=True)
        per = per_instance_loss(model, fp.out, batch.labels)
        if self.group_weights is not None:
            loss = self._robust_loss(per, batch)
        else:
            loss = per.mean()
        if cfg.r3f_lambda > 0 and cfg.r3f_sigma > 0:
            loss = loss + r3f_penalty(
                model.head, fp.Z, cfg.r3f_sigma, cfg.r3f_lambda, self.rng, cfg.r3f_noise, model.task
            )
        return loss, fp

    def _robust_loss(self, per, batch):
        if batch.groups is None:
            raise ConfigError("groupdro needs group ids in the training data")
        num_groups = len(self.group_weights)
        onehot = np.zeros((len(batch), num_groups))
        onehot[np.arange(len(batch)), batch.groups] = 1.0
        counts = onehot.sum(axis=0)
        present = counts > 0
        averaging = onehot / np.where(present, counts, 1.0)
        group_losses = (per.reshape(1, -1) @ Tensor(averaging)).reshape(-1)
        _, self.group_weights = groupdro_update(group_losses.data, self.group_weights, self.config.groupdro_eta, present)
        return (group_losses * Tensor(self.group_weights.q * present)).sum()

    def train_step(self, batch):
        cfg = self.config
        step = self.step_index
        try:
            loss, fp = self.batch_loss(batch)
        except NumericError:
            raise DivergenceError(step, float("nan")) from None
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        ad.zero_grad(self.params)
        ad.backward(loss)
        grad_norm = clip_grad_norm(self.params, cfg.clip_norm) if cfg.clip_norm else float("nan")
        lr = lr_at(step, self.total_steps, cfg.lr, cfg.warmup_ratio)
        self.optimizer.step(lr)
        self.step_index += 1
        return StepResult(value, lr, self._diagnostics(fp, batch, step), grad_norm)

    def _diagnostics(self, fp, batch, step):
        if fp.M is None:
            return identity_diagnostics(step)
        if not batch.is_classification:
            return None
        return mass_diagnostics(fp.M, batch.labels, step)


def train_step(trainer, batch):
    return trainer.train_step(batch)


# ----------------------------------------------------------------------------
# evaluation helpers


def predict(model, dataset, config):
    """Predicted classes (or regression values) for every instance."""
    outs = []
    for start in range(0, len(dataset), config.eval_batch_size):
        batch = dataset.subset(np.arange(start, min(start + config.eval_batch_size, len(dataset))))
        outs.append(forward(model, batch, config, training=False).out.data)
    if not outs:
        return np.zeros(0)
    out = np.concatenate(outs, axis=0)
    return out if model.task == "regression" else out.argmax(axis=1)


def evaluate_model(model, dataset, config):
    preds = predict(model, dataset, config)
    return evaluate(preds, dataset.labels, dataset.groups, model.task)


def dataset_loss(model, dataset, config):
    """Mean task loss over ``dataset`` with raw representations."""
    total = 0.0
    for start in range(0, len(dataset), config.eval_batch_size):
        batch = dataset.subset(np.arange(start, min(start + config.eval_batch_size, len(dataset))))
        fp = forward(model, batch, config, training=False)
        total += float(per_instance_loss(model, fp.out, batch.labels).data.sum())
    return total / len(dataset)


def sharpness_probe(loss_fn, params, radius, k, seed):
    """Loss increase along ``k`` random unit directions of length ``radius``.

    ``loss_fn`` takes no arguments and returns a float evaluated at the
    current parameter values; parameters are restored bitwise afterwards.
    """
    if radius < 0 or k < 1:
        raise ParameterError("radius must be >= 0 and k >= 1")
    params = list(params)
    originals = [p.data.copy() for p in params]
    base = float(loss_fn())
    rng = np.random.default_rng([seed, 13])
    increases = []
    try:
        for _ in range(k):
            parts = [rng.standard_normal(p.shape) for p in params]
            norm = math.sqrt(sum(float(np.sum(d * d)) for d in parts))
            for p, orig, d in zip(params, originals, parts):
                p.data[...] = orig + radius * (d / norm)
            increases.append(float(loss_fn()) - base)
    finally:
        for p, orig in zip(params, originals):
            p.data[...] = orig
    return {"mean": float(np.mean(increases)), "max": float(np.max(increases))}


def model_sharpness(model, dataset, config, radius, k, seed):
    return sharpness_probe(lambda: dataset_loss(model, dataset, config), model.parameters(), radius, k, seed)


# ----------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    model: Model
    log: list
    epoch_seconds: list
    eval_reports: list


def _step_record(step, epoch, result):
    rec = {"kind": "step", "step": step, "epoch": epoch, "loss": result.loss, "lr": result.lr}
    diag = result.diagnostics
    rec["self_mass"] = None if diag is None else diag.self_mass
    rec["positive_mass"] = None if diag is None else diag.positive_mass
    rec["negative_mass"] = None if diag is None else diag.negative_mass
    return rec


def infer_num_classes(config, *datasets):
    if config.num_classes is not None:
        return config.num_classes
    return max(d.num_classes for d in datasets if d is not None and len(d))


def fit(train, eval_set, config, log_path=None, model=None):
    """Train on ``train`` and evaluate on ``eval_set`` after every epoch.

    Every step and epoch evaluation is appended to ``log_path`` (JSON lines)
    as soon as it is produced, so a diverged run leaves its partial log.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    task = "classification" if train.is_classification else "regression"
    if (task == "regression") != (config.loss == "mse"):
        raise ModeError(f"loss {config.loss!r} does not fit a {task} dataset")
    if model is None:
        num_classes = infer_num_classes(config, train, eval_set)
        model = init_model(config, num_classes, task)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    num_groups = max(train.num_groups, eval_set.num_groups if eval_set is not None else 0)
    trainer = Trainer(model, config, config.epochs * steps_per_epoch, num_groups)
    shuffle_rng = np.random.default_rng([config.seed, 17])
    log, epoch_seconds, reports = [], [], []
    sink = Path(log_path).open("w") if log_path is not None else None

    def emit(rec):
        log.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()

    try:
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(train))
            started = time.perf_counter()
            for start in range(0, len(train), config.batch_size):
                batch = train.subset(order[start : start + config.batch_size])
                step = trainer.step_index
                try:
                    result = trainer.train_step(batch)
                except DivergenceError as exc:
                    emit({"kind": "divergence", "step": exc.step, "epoch": epoch})
                    raise DivergenceError(exc.step, exc.loss, log) from None
                emit(_step_record(step, epoch, result))
            epoch_seconds.append(time.perf_counter() - started)
            if eval_set is not None and len(eval_set):
                report = evaluate_model(model, eval_set, config)
                reports.append(report)
                emit({"kind": "eval", "epoch": epoch, **report.as_dict()})
    finally:
        if sink is not None:
            sink.close()
    return FitResult(model, log, epoch_seconds, reports)
