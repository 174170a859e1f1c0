"""Hierarchical attention document classifier with latent phrase boundaries
trained by expectation maximization."""

from .model import Document, ModelParams, predict
from .em import TrainConfig, train

__all__ = ["Document", "ModelParams", "TrainConfig", "predict", "train"]
__version__ = "0.1.0"
