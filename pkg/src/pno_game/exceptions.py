"""
Exception hierarchy for the PNO toolkit.

Every error derives from PnoError and from the closest builtin, so callers can
catch either ``PnoError`` or e.g. ``ValueError``.
"""
from typing import List, Optional, Sequence


class PnoError(Exception):
    """Base class for all toolkit errors."""


class InvalidShapeError(PnoError, ValueError):
    """A network shape has a zero or negative dimension."""


class DimensionMismatchError(PnoError, ValueError):
    """An input, adjoint or gradient has the wrong length."""


class NonFiniteGradientError(PnoError, FloatingPointError):
    """An optimizer update received NaN or infinite gradient entries."""


class DomainError(PnoError, ValueError):
    """A query lies outside the game horizon or the valid type space."""


class IntegrationError(PnoError, RuntimeError):
    """The adaptive integrator could not reach the end of its time span."""

    def __init__(self, message: str, failure_time: Optional[float] = None):
        super().__init__(message)
        self.failure_time = failure_time


class PretrainDivergenceError(PnoError, RuntimeError):
    """Boundary pretraining loss grew by the divergence factor."""

    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


class NonFiniteLossError(PnoError, FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"Loss term '{term}' is not finite ({value})")
        self.term = term
        self.value = value


class BvpConvergenceError(PnoError, RuntimeError):
    """Shooting failed after all restarts."""

    def __init__(self, message: str, best_residual: float = float("inf")):
        super().__init__(message)
        self.best_residual = best_residual


class TrainingAbortedError(PnoError, RuntimeError):
    """Too many rollouts failed within one resampling batch."""


class CheckpointError(PnoError, ValueError):
    """A checkpoint file is missing or malformed."""


class CheckpointMismatchError(CheckpointError):
    """A checkpoint was produced for a different game geometry."""


class ConfigError(PnoError, ValueError):
    """The run configuration is malformed."""

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        super().__init__(message)
        self.errors = list(errors or [])
