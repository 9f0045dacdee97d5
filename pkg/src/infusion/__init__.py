"""Toy-scale laboratory for concept customization of a 2-D latent diffusion model.

Residual value embeddings on a frozen denoiser (with attention-map injection
from a foundational stream) are compared against full fine-tuning and token
inversion, measured by a latent Fisher divergence, a Gaussian-fit
2-Wasserstein distance and mode coverage.
"""

from __future__ import annotations

from .customization import (
    METHODS,
    CustomizationConfig,
    ResidualConceptEmbedding,
    train_full_finetune,
    train_infusion,
    train_token_inversion,
)
from .denoiser import DenoiserConfig, DenoiserWeights, PromptSpec, denoise_forward, init_weights
from .diffusion import SamplerConfig, TrainConfig, ddim_sample, make_schedule, train_base
from .errors import ContractError, IntegrityError, MigrationError, NumericError, ShapeError, TrainingError
from .metrics import gaussian_fit, latent_fisher_divergence, mode_coverage, w2_gaussian
from .worlds import ConceptWorld, LinearTarget, PointSet, build_four_peak_world, build_grid25_world

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "ConceptWorld",
    "ContractError",
    "CustomizationConfig",
    "DenoiserConfig",
    "DenoiserWeights",
    "IntegrityError",
    "LinearTarget",
    "MigrationError",
    "NumericError",
    "PointSet",
    "PromptSpec",
    "ResidualConceptEmbedding",
    "SamplerConfig",
    "ShapeError",
    "TrainConfig",
    "TrainingError",
    "build_four_peak_world",
    "build_grid25_world",
    "ddim_sample",
    "denoise_forward",
    "gaussian_fit",
    "init_weights",
    "latent_fisher_divergence",
    "make_schedule",
    "mode_coverage",
    "train_base",
    "train_full_finetune",
    "train_infusion",
    "train_token_inversion",
    "w2_gaussian",
]
