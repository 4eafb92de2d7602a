"""
Adaptive RK45 (Dormand-Prince 4(5)) integration with dense output.

Thin wrapper over ``scipy.integrate.solve_ivp`` that samples the dense
solution on a requested grid and turns solver failures into IntegrationError.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from ..exceptions import IntegrationError

logger = logging.getLogger(__name__)

VectorField = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class DenseTrajectory:
    """Grid samples of an ODE solution plus the continuous interpolant."""

    times: np.ndarray
    values: np.ndarray
    interpolant: Optional[Callable[[np.ndarray], np.ndarray]] = None
    n_evaluations: int = 0

    def __call__(self, t) -> np.ndarray:
        """Solution at ``t`` (scalar or array), shape (..., n)."""
        if self.interpolant is None:
            return np.broadcast_to(self.values[0], np.shape(t) + self.values.shape[1:]).copy()
        out = self.interpolant(np.asarray(t, dtype=np.float64))
        return np.moveaxis(out, 0, -1)


def rk45_integrate(
    field: VectorField,
    y0: Sequence[float],
    t_span: Tuple[float, float],
    grid: Optional[Sequence[float]] = None,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    max_step: float = np.inf,
) -> DenseTrajectory:
    """Integrate ``field`` over ``t_span`` (which may run backwards).

    Args:
        field: f(t, y) returning dy/dt.
        y0: Initial value at ``t_span[0]``.
        t_span: (t_start, t_end).
        grid: Times to sample, each inside the span; defaults to both endpoints.
        rtol, atol: Local error tolerances of the embedded pair.

    Returns:
        DenseTrajectory with ``values[k]`` the solution at ``grid[k]``.

    Raises:
        IntegrationError: step-size underflow or a non-finite solution.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    t_start, t_end = float(t_span[0]), float(t_span[1])
    grid = np.asarray(grid if grid is not None else (t_start, t_end), dtype=np.float64)
    if not np.all(np.isfinite(y0)):
        raise IntegrationError("Initial value is not finite", failure_time=t_start)

    if t_start == t_end:
        return DenseTrajectory(grid, np.tile(y0, (grid.size, 1)))

    solution = solve_ivp(
        field, (t_start, t_end), y0, method="RK45", rtol=rtol, atol=atol,
        dense_output=True, max_step=max_step,
    )
    if not solution.success:
        failure_time = float(solution.t[-1]) if solution.t.size else t_start
        raise IntegrationError(f"RK45 failed: {solution.message}", failure_time=failure_time)

    values = solution.sol(grid).T
    # Endpoint samples come from the accepted final step, not the interpolant.
    values[grid == t_end] = solution.y[:, -1]
    values[grid == t_start] = y0
    if not np.all(np.isfinite(values)):
        bad = grid[~np.all(np.isfinite(values), axis=1)]
        raise IntegrationError("RK45 produced non-finite values", failure_time=float(bad[0]))
    return DenseTrajectory(grid, values, solution.sol, int(solution.nfev))
