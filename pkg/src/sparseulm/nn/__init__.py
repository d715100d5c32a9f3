"""Sparse layers, the multi-level network and its training loop."""

from .network import NetworkConfig, SparseNet, load_checkpoint, save_checkpoint
from .train import TrainingDiverged, TrainSchedule, make_clips, predict_rasters, train

__all__ = [
    "NetworkConfig",
    "SparseNet",
    "TrainSchedule",
    "TrainingDiverged",
    "load_checkpoint",
    "make_clips",
    "predict_rasters",
    "save_checkpoint",
    "train",
]
