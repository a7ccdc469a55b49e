"""Deterministic diffusion inversion and embedding-guided model editing in numpy."""

from .autodiff import Graph, Tensor, backward, precision
from .datasets import toy_datasets
from .denoiser import DenoiserConfig, ParamStore, init_denoiser, predict_noise
from .finetune import finetune_full, finetune_stepwise, precompute_latents, train_base
from .formats import load_checkpoint, save_checkpoint
from .guidance import ChannelStats, EditRecipe, LinearProbe, TrainedClassifier
from .pipelines import (
    EditSession,
    continuous_transition,
    manipulate,
    multi_attribute,
    project_to_domain,
    round_trip,
    translate_unseen,
)
from .sampler import CombinationWeights, ddim_generate, ddim_invert
from .schedule import Schedule, make_grid, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "precision",
    "toy_datasets",
    "train_base",
    "precompute_latents",
    "finetune_full",
    "finetune_stepwise",
    "save_checkpoint",
    "load_checkpoint",
    "DenoiserConfig",
    "ParamStore",
    "init_denoiser",
    "predict_noise",
    "ChannelStats",
    "EditRecipe",
    "LinearProbe",
    "TrainedClassifier",
    "EditSession",
    "manipulate",
    "translate_unseen",
    "project_to_domain",
    "round_trip",
    "multi_attribute",
    "continuous_transition",
    "CombinationWeights",
    "ddim_invert",
    "ddim_generate",
    "Schedule",
    "make_grid",
    "make_linear_schedule",
]
