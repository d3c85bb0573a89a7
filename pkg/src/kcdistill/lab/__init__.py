"""Desk-scale MLP bench for running knowledge consistent distillation end to end."""

from .data import Dataset, GenSpec, make_synthetic_dataset
from .losses import KdConfig, LayerPair, LossConfig, distill_losses
from .mlp import ModelWeights, forward_with_activations, init_model
from .pipeline import RunConfig, RunReport, run_algorithm1
from .train import DistillConfig, TrainConfig, distill_train, train_classifier

__all__ = [
    "Dataset",
    "GenSpec",
    "make_synthetic_dataset",
    "KdConfig",
    "LayerPair",
    "LossConfig",
    "distill_losses",
    "ModelWeights",
    "forward_with_activations",
    "init_model",
    "RunConfig",
    "RunReport",
    "run_algorithm1",
    "DistillConfig",
    "TrainConfig",
    "distill_train",
    "train_classifier",
]
