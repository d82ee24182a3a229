"""Unified generative-autoencoder zoo."""
from .base import LossBreakdown, StepResult, reconstruction_nll, squared_error
from .config import (ADVERSARIAL_KINDS, DETERMINISTIC_KINDS, MODEL_KINDS,
                     ConfigError, ModelConfig)
from .msssim import msssim, max_feasible_scales
from .vq import Codebook, vq_quantize
from .zoo import GaeModel, build_model, model_loss, permute_dims

__all__ = [
    "MODEL_KINDS", "DETERMINISTIC_KINDS", "ADVERSARIAL_KINDS", "ModelConfig",
    "ConfigError", "LossBreakdown", "StepResult", "reconstruction_nll",
    "squared_error", "msssim", "max_feasible_scales", "Codebook", "vq_quantize",
    "GaeModel", "build_model", "model_loss", "permute_dims",
]
