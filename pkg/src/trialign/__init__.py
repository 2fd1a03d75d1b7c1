"""Tri-modal video/text/fusion alignment pre-training at desk scale."""

from .losses import (
    EmbeddingBatch,
    LossBreakdown,
    LossHyper,
    exclusive_nce_anchor,
    focal_mlm,
    ranking_loss,
    reverse_alignment,
    tma_total,
    total_loss,
)
from .encoders import ModelConfig, TriModalModel, init_model
from .substrate import Rng, grad_check

__version__ = "0.1.0"

__all__ = [
    "EmbeddingBatch",
    "LossBreakdown",
    "LossHyper",
    "ModelConfig",
    "Rng",
    "TriModalModel",
    "exclusive_nce_anchor",
    "focal_mlm",
    "grad_check",
    "init_model",
    "ranking_loss",
    "reverse_alignment",
    "tma_total",
    "total_loss",
]
