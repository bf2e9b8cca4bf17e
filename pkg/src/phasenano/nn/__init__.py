"""Minimal differentiable tensor core and the image-to-image architectures."""

from .graph import GraphError, LayerSpec, ModelGraph, build_onet, build_thetanet, build_unet
from .model import Model, NumericsError
from .train import (
    Checkpoint,
    CheckpointFormatError,
    TrainConfig,
    TrainingDiverged,
    evaluate_loss,
    infer,
    load_checkpoint,
    save_checkpoint,
    save_history_csv,
    train,
    train_thetanet,
)

__all__ = [
    "GraphError",
    "LayerSpec",
    "ModelGraph",
    "build_unet",
    "build_onet",
    "build_thetanet",
    "Model",
    "NumericsError",
    "Checkpoint",
    "CheckpointFormatError",
    "TrainConfig",
    "TrainingDiverged",
    "train",
    "train_thetanet",
    "evaluate_loss",
    "infer",
    "save_checkpoint",
    "load_checkpoint",
    "save_history_csv",
]
