"""Small trainable encoders producing one representation row per instance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ParseError

KINDS = ("embedding-bag", "mlp", "attention-block")
_PAD_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "mlp"
    input_dim: int = 16  # feature dim for mlp, vocab size otherwise
    hidden_dim: int = 32
    rep_dim: int = 16
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r} (expected one of {KINDS})")
        if self.input_dim < 1 or self.hidden_dim < 1 or self.rep_dim < 1:
            raise ConfigError("encoder dimensions must be >= 1")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict

    def parameters(self):
        return list(self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def shapes(self):
        return {name: t.shape for name, t in self.tensors.items()}


def _weight(rng, fan_in, fan_out, scale):
    w = rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(fan_in))
    return Tensor(w, requires_grad=True)


def _bias(size):
    return Tensor(np.zeros(size), requires_grad=True)


def init_encoder(config):
    """Seeded initialisation; weights ~ N(0, (init_scale / sqrt(fan_in))^2), biases zero."""
    rng = np.random.default_rng(config.seed)
    s, h, d, v = config.init_scale, config.hidden_dim, config.rep_dim, config.input_dim
    t = {}
    if config.kind == "mlp":
        t["w1"] = _weight(rng, v, h, s)
        t["b1"] = _bias(h)
        t["w2"] = _weight(rng, h, d, s)
        t["b2"] = _bias(d)
    elif config.kind == "embedding-bag":
        t["embed"] = Tensor(rng.standard_normal((v, h)) * s, requires_grad=True)
        t["w"] = _weight(rng, h, d, s)
        t["b"] = _bias(d)
    else:
        t["embed"] = Tensor(rng.standard_normal((v, h)) * s, requires_grad=True)
        t["cls"] = Tensor(rng.standard_normal(h) * s, requires_grad=True)
        for name in ("wq", "wk", "wv"):
            t[name] = _weight(rng, h, h, s)
        t["w1"] = _weight(rng, h, h, s)
        t["b1"] = _bias(h)
        t["w2"] = _weight(rng, h, d, s)
        t["b2"] = _bias(d)
    return EncoderParams(config, t)


def _check_batch(params, batch):
    cfg = params.config
    if len(batch) == 0:
        raise DataError("empty batch")
    if cfg.kind == "mlp":
        if batch.features is None:
            raise ConfigError("mlp encoder needs dense features")
        if batch.features.shape[1] != cfg.input_dim:
            raise ConfigError(f"feature dim {batch.features.shape[1]} does not match encoder input dim {cfg.input_dim}")
        return
    if batch.tokens is None:
        raise ConfigError(f"{cfg.kind} encoder needs token sequences")
    if np.any(batch.lengths < 1):
        raise DataError("empty token sequence")
    if batch.max_token >= cfg.input_dim:
        raise DataError(f"token id {batch.max_token} outside vocabulary of size {cfg.input_dim}")


def embed(params, batch):
    """Embedding-layer output: dense features, or token embeddings (n x L x h)."""
    _check_batch(params, batch)
    if params.config.kind == "mlp":
        return batch.features
    return params["embed"].data[batch.tokens]


def _token_mask(batch):
    width = batch.tokens.shape[1]
    return np.arange(width)[None, :] < batch.lengths[:, None]


def encode_embedded(params, emb, batch):
    """Representations from an embedding-layer tensor (see :func:`embed`)."""
    kind = params.config.kind
    p = params.tensors
    if kind == "mlp":
        hidden = ad.tanh(emb @ p["w1"] + p["b1"])
        return hidden @ p["w2"] + p["b2"]
    mask = _token_mask(batch)
    if kind == "embedding-bag":
        weights = mask / batch.lengths[:, None]
        pooled = (emb * Tensor(weights[:, :, None])).sum(axis=1)
        return pooled @ p["w"] + p["b"]
    n, h = emb.shape[0], params.config.hidden_dim
    cls = ad.broadcast_to(p["cls"], (n, 1, h))
    x = ad.concat([cls, emb], axis=1)
    q = x[:, 0:1, :] @ p["wq"]
    k = x @ p["wk"]
    v = x @ p["wv"]
    keep = np.concatenate([np.ones((n, 1), dtype=bool), mask], axis=1)
    bias = np.where(keep, 0.0, _PAD_BIAS)[:, None, :]
    scores = ad.scale(q @ k.T, 1.0 / math.sqrt(h)) + Tensor(bias)
    attended = (ad.row_softmax(scores) @ v).reshape(n, h)
    hidden = ad.tanh(attended @ p["w1"] + p["b1"])
    return hidden @ p["w2"] + p["b2"]


def encode(params, batch):
    """Per-instance representations ``H`` (n x rep_dim)."""
    _check_batch(params, batch)
    if params.config.kind == "mlp":
        emb = Tensor(batch.features)
    else:
        emb = params["embed"][batch.tokens]
    return encode_embedded(params, emb, batch)


# ----------------------------------------------------------------------------
# flat-array parameter files with a text header

MAGIC = "MATCHTUNE-PARAMS 1"


def save_params(path, tensors, meta=None):
    """Write named arrays as one little-endian float64 block after a JSON header line."""
    entries, offset, blocks = [], 0, []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": int(arr.size)})
        offset += arr.size
        blocks.append(arr.reshape(-1))
    header = {"meta": meta or {}, "dtype": "<f8", "count": offset, "tensors": entries}
    flat = np.concatenate(blocks) if blocks else np.zeros(0, dtype="<f8")
    with Path(path).open("wb") as fh:
        fh.write((MAGIC + "\n" + json.dumps(header) + "\n").encode())
        fh.write(flat.astype("<f8").tobytes())


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(dict of arrays, meta)``."""
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first].decode(errors="replace") != MAGIC:
        raise ParseError(f"{path}: not a parameter file")
    try:
        header = json.loads(raw[first + 1 : second])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt header ({exc.msg})") from None
    flat = np.frombuffer(raw[second + 1 :], dtype="<f8")
    if flat.size != header["count"]:
        raise ParseError(f"{path}: expected {header['count']} values, found {flat.size}")
    arrays = {}
    for e in header["tensors"]:
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + e["size"]].reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
