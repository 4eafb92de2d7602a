"""
Uniform sampling of (x, t, theta) and residual-driven evolutionary resampling.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ..models.operator import OperatorEnsemble
from .losses import hji_residuals

logger = logging.getLogger(__name__)

ResidualFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplingBox:
    d_bounds: Tuple[float, float] = (15.0, 105.0)
    v_bounds: Tuple[float, float] = (15.0, 32.0)

    def sample_states(self, rng: np.random.Generator, count: int) -> np.ndarray:
        d = rng.uniform(self.d_bounds[0], self.d_bounds[1], size=(count, 2))
        v = rng.uniform(self.v_bounds[0], self.v_bounds[1], size=(count, 2))
        return np.stack([d[:, 0], v[:, 0], d[:, 1], v[:, 1]], axis=1)


def sample_times(
    rng: np.random.Generator, count: int, window: Tuple[float, float], grid_step: Optional[float] = None
) -> np.ndarray:
    """Uniform times in ``window``; with ``grid_step`` they are snapped down to
    multiples of it (so rollouts starting there land on the output grid)."""
    lo, hi = window
    times = rng.uniform(lo, hi, size=count)
    if grid_step:
        last = np.floor((hi - 1e-12) / grid_step) * grid_step
        times = np.minimum(np.floor(times / grid_step) * grid_step, last)
        times = np.round(times / grid_step) * grid_step
    return times


def sample_thetas(rng: np.random.Generator, count: int, theta_set: Sequence[Tuple[int, int]]) -> np.ndarray:
    choice = rng.integers(0, len(theta_set), size=count)
    return np.asarray(theta_set, dtype=np.int64)[choice]


@dataclass(frozen=True, eq=False)
class SamplePool:
    """Fixed-capacity pool of (x, t, theta) with cached residual magnitudes."""

    states: np.ndarray
    times: np.ndarray
    thetas: np.ndarray
    residuals: np.ndarray

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def capacity(self) -> int:
        return len(self)


def ensemble_residual_fn(ens: OperatorEnsemble) -> ResidualFn:
    """|r_1| + |r_2| of the ensemble's HJI residuals."""
    view = ens.view()

    def residual(states: np.ndarray, times: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        if not len(times):
            return np.zeros(0)
        res = hji_residuals(view, ens.game, states, times, thetas, create_graph=False)
        return res.detach().abs().sum(dim=-1).numpy()

    return residual


def uniform_pool(
    rng: np.random.Generator,
    capacity: int,
    box: SamplingBox,
    window: Tuple[float, float],
    theta_set: Sequence[Tuple[int, int]],
    residual_fn: ResidualFn,
    grid_step: Optional[float] = None,
) -> SamplePool:
    states = box.sample_states(rng, capacity)
    times = sample_times(rng, capacity, window, grid_step)
    thetas = sample_thetas(rng, capacity, theta_set)
    return SamplePool(states, times, thetas, residual_fn(states, times, thetas))


def evolve_samples(
    pool: SamplePool,
    residual_fn: ResidualFn,
    rng: np.random.Generator,
    box: SamplingBox,
    window: Tuple[float, float],
    theta_set: Sequence[Tuple[int, int]],
    grid_step: Optional[float] = None,
) -> SamplePool:
    """Keep entries whose residual is at least the pool mean, refill uniformly.

    Residuals of the kept entries are recomputed with ``residual_fn`` before
    filtering; ties with the mean are kept, so a pool of equal residuals
    survives whole.
    """
    residuals = residual_fn(pool.states, pool.times, pool.thetas)
    keep = residuals >= residuals.mean()
    n_new = pool.capacity - int(keep.sum())
    fresh = uniform_pool(rng, n_new, box, window, theta_set, residual_fn, grid_step)
    logger.debug("Evolve: kept %d of %d (mean residual %.3e)", pool.capacity - n_new, pool.capacity, residuals.mean())
    return SamplePool(
        np.concatenate([pool.states[keep], fresh.states]),
        np.concatenate([pool.times[keep], fresh.times]),
        np.concatenate([pool.thetas[keep], fresh.thetas]),
        np.concatenate([residuals[keep], fresh.residuals]),
    )
