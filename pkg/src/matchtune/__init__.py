"""Robust fine-tuning with in-batch matching-matrix representation fusion."""

from .autodiff import Tensor, backward, finite_diff_check
from .data import Dataset, DatasetSpec, generate, inject_label_noise, reduce_minority
from .encoders import EncoderConfig, encode, init_encoder
from .matching import MatchMode, apply_mask, compose, compute_match_matrix, mass_diagnostics
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "Dataset",
    "DatasetSpec",
    "generate",
    "inject_label_noise",
    "reduce_minority",
    "EncoderConfig",
    "encode",
    "init_encoder",
    "MatchMode",
    "apply_mask",
    "compose",
    "compute_match_matrix",
    "mass_diagnostics",
    "TrainConfig",
    "fit",
]
