"""
Differential game models.
"""

from .base_game import DifferentialGame
from .intersection import THETA_SPACE, Costate, GameGeometry, IntersectionGame, JointState

__all__ = ["DifferentialGame", "IntersectionGame", "GameGeometry", "JointState", "Costate", "THETA_SPACE"]
