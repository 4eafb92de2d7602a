"""
Networks, operator ensembles and checkpoint files.
"""

from .autodiff_net import ActivationKind, NetworkShape, ParameterSet, init_network
from .checkpoint import load_checkpoint, save_checkpoint
from .operator import LatticeSpec, Normalizer, OperatorEnsemble, PolicySource

__all__ = [
    "ActivationKind",
    "NetworkShape",
    "ParameterSet",
    "init_network",
    "LatticeSpec",
    "Normalizer",
    "OperatorEnsemble",
    "PolicySource",
    "load_checkpoint",
    "save_checkpoint",
]
