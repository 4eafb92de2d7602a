"""
PNO Game

Pontryagin neural operators for the two-vehicle intersection game: value and
costate operators conditioned on the collision zone, trained with
rollout-regularized physics losses and checked against BVP ground truth.
"""

__version__ = "1.0.0"
__description__ = "Pontryagin neural operators for a two-player intersection game"

from .pipeline import PnoPipeline
from .utils.config import RunConfig, load_config

__all__ = ["PnoPipeline", "RunConfig", "load_config"]
