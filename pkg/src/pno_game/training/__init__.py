"""
Losses, sampling and the PNO and hybrid trainers.
"""

from .hybrid import HybridConfig, train_hybrid
from .losses import LossWeights
from .trainer import TrainConfig, train_pno

__all__ = ["LossWeights", "TrainConfig", "train_pno", "HybridConfig", "train_hybrid"]
