"""Preference-conditioned graph denoiser trained as a consistency model."""

from .diffusion import NoiseSchedule, cosine_steps, noise_sample, noise_step, q_step, qbar, qbar_iterated
from .graph import HeteroGraph, batch_graphs, build_graph
from .model import (
    Adam,
    Denoiser,
    SampleResult,
    TrainConfig,
    TrainingExample,
    assignment_bits,
    bce_with_logits,
    bits_to_marginals,
    cm_loss,
    cm_train_step,
    consistency_sample,
    example_from_label,
    grad_check,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    save_checkpoint,
    train_cm,
)
from .network import NetConfig, sigmoid

__all__ = [
    "Adam",
    "Denoiser",
    "HeteroGraph",
    "NetConfig",
    "NoiseSchedule",
    "SampleResult",
    "TrainConfig",
    "TrainingExample",
    "assignment_bits",
    "batch_graphs",
    "bce_with_logits",
    "bits_to_marginals",
    "build_graph",
    "cm_loss",
    "cm_train_step",
    "consistency_sample",
    "cosine_steps",
    "example_from_label",
    "grad_check",
    "load_checkpoint",
    "model_from_dict",
    "model_to_dict",
    "noise_sample",
    "noise_step",
    "q_step",
    "qbar",
    "qbar_iterated",
    "save_checkpoint",
    "sigmoid",
    "train_cm",
]
