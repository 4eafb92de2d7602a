"""
ODE integration, PMP rollouts and the BVP ground-truth solver.
"""

from .bvp import BvpConfig, ContinuationSchedule, SupervisedDataset, generate_dataset, solve_bvp
from .integrator import rk45_integrate
from .rollout import RolloutConfig, TrajectoryBundle, forward_rollout

__all__ = [
    "rk45_integrate",
    "RolloutConfig",
    "TrajectoryBundle",
    "forward_rollout",
    "BvpConfig",
    "ContinuationSchedule",
    "SupervisedDataset",
    "generate_dataset",
    "solve_bvp",
]
