"""gae-forge: a generative-autoencoder zoo with ex-post latent samplers and a
benchmark harness, built on a self-contained reverse-mode autodiff core."""

from .tensor import Tensor, Rng, backward, grad_check, no_grad
from .models import (MODEL_KINDS, GaeModel, LossBreakdown, ModelConfig,
                     build_model, model_loss)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .samplers import SamplerConfig, SamplerState, fit_sampler, sample
from .data import Dataset, load_idx, split_train_val, synth_dataset

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Rng", "backward", "grad_check", "no_grad",
    "MODEL_KINDS", "GaeModel", "LossBreakdown", "ModelConfig", "build_model",
    "model_loss", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "SamplerConfig", "SamplerState", "fit_sampler", "sample",
    "Dataset", "load_idx", "split_train_val", "synth_dataset", "__version__",
]
