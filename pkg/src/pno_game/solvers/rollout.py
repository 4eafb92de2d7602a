"""
Characteristic-curve rollouts.

``forward_rollout`` drives the joint state with both players' costate-net
policies (re-queried at every RK stage) while accumulating each player's
running cost. ``backward_costate`` integrates the PMP costate equations back
from T along the frozen state path and ``backward_value`` turns accumulated
running cost into value targets.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline

from ..exceptions import DomainError, IntegrationError
from ..game.base_game import DifferentialGame
from ..models.operator import OperatorEnsemble, PolicySource
from .integrator import rk45_integrate

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = (
    "case_id", "theta1", "theta2", "t", "d1", "v1", "d2", "v2", "u1", "u2",
    "lam1_d1", "lam1_v1", "lam1_d2", "lam1_v2",
    "lam2_d1", "lam2_v1", "lam2_d2", "lam2_v2",
    "V1", "V2", "in_bounds",
)

StatePath = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RolloutConfig:
    dt_grid: float = 0.1
    rk_rel_tol: float = 1e-6
    rk_abs_tol: float = 1e-8
    #: X_HJ: position and velocity bounds used for the in-bounds mask.
    d_bounds: Tuple[float, float] = (15.0, 105.0)
    v_bounds: Tuple[float, float] = (15.0, 32.0)
    terminal_from_g: bool = False
    quadrature_refinement: int = 10

    def validation_errors(self) -> List[str]:
        errors = []
        if self.dt_grid <= 0:
            errors.append("dt_grid must be positive")
        if self.rk_rel_tol <= 0 or self.rk_abs_tol <= 0:
            errors.append("integrator tolerances must be positive")
        if self.quadrature_refinement < 1:
            errors.append("quadrature_refinement must be at least 1")
        return errors

    def time_grid(self, t0: float, horizon: float) -> np.ndarray:
        """Output grid from ``t0`` to ``horizon`` whose last entry is exactly ``horizon``."""
        span = horizon - t0
        steps = int(round(span / self.dt_grid))
        if steps < 1 or abs(steps * self.dt_grid - span) > 1e-12 * max(1.0, horizon):
            raise DomainError(f"dt_grid {self.dt_grid} does not divide [{t0}, {horizon}]")
        grid = t0 + self.dt_grid * np.arange(steps + 1)
        grid[-1] = horizon
        return grid

    def in_bounds(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(states)
        d_ok = (s[:, [0, 2]] >= self.d_bounds[0]) & (s[:, [0, 2]] <= self.d_bounds[1])
        v_ok = (s[:, [1, 3]] >= self.v_bounds[0]) & (s[:, [1, 3]] <= self.v_bounds[1])
        return np.all(d_ok & v_ok, axis=1)


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """One trajectory on a shared time grid.

    Per-player arrays are indexed ``[step, player - 1]``; costates are in
    each player's own frame. Closed-loop simulations leave the costate fields
    empty.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    thetas: Tuple[int, int]
    in_bounds: np.ndarray
    forward_costates: Optional[np.ndarray] = None
    backward_costates: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    accumulated_cost: Optional[np.ndarray] = None
    state_path: Optional[StatePath] = field(default=None, repr=False)
    #: Open-loop controls as a function of time (BVP solutions only).
    control_path: Optional[StatePath] = field(default=None, repr=False)
    case_id: int = 0

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t) -> np.ndarray:
        if self.state_path is not None:
            return self.state_path(t)
        return CubicSpline(self.times, self.states, axis=0)(t)


def _policy_controls(
    ens: OperatorEnsemble, source: PolicySource, states: np.ndarray, t, thetas: Tuple[int, int]
) -> np.ndarray:
    """(B, 2) controls of both players from the ensemble."""
    game = ens.game
    columns = []
    for player in (1, 2):
        if source is PolicySource.COSTATE:
            lam = ens.costate_batch(states, t, thetas, player)
        else:
            lam, _ = ens.value_gradient_batch(states, t, thetas, player)
        columns.append(game.optimal_control(lam[:, 1]))
    return np.stack(columns, axis=-1)


def forward_rollout(
    ens: OperatorEnsemble,
    x0: Sequence[float],
    t0: float,
    thetas: Sequence[int],
    cfg: RolloutConfig = RolloutConfig(),
    source: PolicySource = PolicySource.COSTATE,
    case_id: int = 0,
) -> TrajectoryBundle:
    """Roll the joint state forward from (x0, t0) to T under the ensemble's policies.

    The returned bundle carries states, controls, forward costates, the
    accumulated running cost and the backward values and costates.

    Raises:
        IntegrationError: the integrator failed.
        DomainError: t0 outside [0, T).
    """
    game = ens.game
    horizon = game.horizon
    if not 0.0 <= t0 < horizon:
        raise DomainError(f"Rollout start time {t0} not in [0, {horizon})")
    pair = game.validate_thetas(thetas)
    source = PolicySource(source)
    grid = cfg.time_grid(t0, horizon)

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        state = y[:4]
        u = _policy_controls(ens, source, state, min(max(t, 0.0), horizon), pair)[0]
        running = game.running_cost(state, u[0], u[1], pair)
        return np.concatenate([game.dynamics(state, u[0], u[1]), running])

    y0 = np.concatenate([np.asarray(x0, dtype=np.float64), np.zeros(2)])
    solution = rk45_integrate(rhs, y0, (t0, horizon), grid, cfg.rk_rel_tol, cfg.rk_abs_tol)
    states = solution.values[:, :4]
    accumulated = solution.values[:, 4:]
    controls = _policy_controls(ens, source, states, grid, pair)

    forward_costates = None
    if ens.has_costate:
        forward_costates = np.stack(
            [ens.costate_batch(states, grid, pair, player) for player in (1, 2)], axis=1
        )

    def state_path(t):
        return solution(t)[..., :4]

    def control_path(t):
        u = _policy_controls(ens, source, state_path(t), t, pair)
        return u[0] if np.ndim(t) == 0 else u

    if cfg.terminal_from_g or forward_costates is None:
        terminal = np.stack([game.terminal_costate(states[-1], player) for player in (1, 2)])
    else:
        terminal = forward_costates[-1]
    backward_costates = backward_costate(game, grid, state_path, terminal, pair, cfg)
    values = backward_value(game, grid, states, controls, pair, accumulated_cost=accumulated)

    return TrajectoryBundle(
        times=grid,
        states=states,
        controls=controls,
        thetas=pair,
        in_bounds=cfg.in_bounds(states),
        forward_costates=forward_costates,
        backward_costates=backward_costates,
        values=values,
        accumulated_cost=accumulated,
        state_path=state_path,
        control_path=control_path,
        case_id=case_id,
    )


def integrate_costate(
    game: DifferentialGame,
    state_path: StatePath,
    lam_start: np.ndarray,
    t_span: Tuple[float, float],
    grid: np.ndarray,
    thetas: Tuple[int, int],
    rtol: float = 1e-6,
    atol: float = 1e-8,
) -> np.ndarray:
    """Both players' costates along a frozen state path, shape (len(grid), 2, 4)."""
    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        state = state_path(t)
        return np.concatenate([
            game.costate_dynamics(y[:4], state, thetas[0], 1),
            game.costate_dynamics(y[4:], state, thetas[1], 2),
        ])

    solution = rk45_integrate(rhs, np.asarray(lam_start, dtype=np.float64).reshape(8), t_span, grid, rtol, atol)
    return solution.values.reshape(-1, 2, 4)


def backward_costate(
    game: DifferentialGame,
    times: np.ndarray,
    states,
    terminal_costates: np.ndarray,
    thetas: Sequence[int],
    cfg: RolloutConfig = RolloutConfig(),
) -> np.ndarray:
    """Integrate both players' costates from T back to ``times[0]``.

    Args:
        states: Either a callable state path t -> joint state (a rollout's
            dense output) or the (K, 4) state samples on ``times``, which are
            then interpolated with a cubic spline.
        terminal_costates: (2, 4) own-frame costates at ``times[-1]``.

    Returns:
        (K, 2, 4) costates on ``times``.
    """
    pair = game.validate_thetas(thetas)
    path = states if callable(states) else CubicSpline(times, np.asarray(states), axis=0)
    reversed_grid = np.asarray(times)[::-1]
    lam = integrate_costate(
        game, path, terminal_costates, (times[-1], times[0]), reversed_grid, pair,
        cfg.rk_rel_tol, cfg.rk_abs_tol,
    )
    return lam[::-1].copy()


def backward_value(
    game: DifferentialGame,
    times: np.ndarray,
    states: np.ndarray,
    controls: np.ndarray,
    thetas: Sequence[int],
    accumulated_cost: Optional[np.ndarray] = None,
    refinement: int = 10,
    state_path: Optional[StatePath] = None,
    hold_controls: bool = False,
    control_path: Optional[StatePath] = None,
) -> np.ndarray:
    """Backward values V_i(t_k) = -(integral_{t_k}^T (l_i + c_i) ds + g_i(X(T))).

    With ``accumulated_cost`` (the running cost integrated alongside the
    states) the integral is a difference of samples; otherwise it is a
    trapezoid rule on ``refinement`` sub-steps per grid interval, with states
    from ``state_path`` (default: cubic spline through ``states``) and controls
    from ``control_path`` when given, else held or linearly interpolated.

    Returns:
        (K, 2) values; the last row equals -g exactly.
    """
    pair = game.validate_thetas(thetas)
    times = np.asarray(times, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    terminal = np.array([
        game.terminal_loss_and_gradient(game.to_player_frame(states[-1], player)[:2])[0]
        for player in (1, 2)
    ], dtype=np.float64)

    if accumulated_cost is not None:
        cost_to_go = accumulated_cost[-1] - np.asarray(accumulated_cost)
        cost_to_go[-1] = 0.0
        return -(cost_to_go + terminal)

    path = state_path or CubicSpline(times, states, axis=0)
    intervals = np.zeros((times.size - 1, 2))
    for k in range(times.size - 1):
        fine = np.linspace(times[k], times[k + 1], refinement + 1)
        fine_states = path(fine)
        if control_path is not None:
            u = np.asarray(control_path(fine)).reshape(fine.size, 2)
        elif hold_controls:
            u = np.tile(controls[k], (fine.size, 1))
        else:
            u = np.stack([np.interp(fine, times, controls[:, j]) for j in range(2)], axis=-1)
        running = game.running_cost(fine_states, u[:, 0], u[:, 1], pair)
        intervals[k] = trapezoid(running, fine, axis=0)
    cost_to_go = np.zeros((times.size, 2))
    cost_to_go[:-1] = np.cumsum(intervals[::-1], axis=0)[::-1]
    return -(cost_to_go + terminal)


def rollout_batch(
    ens: OperatorEnsemble,
    initial_states: np.ndarray,
    start_times: np.ndarray,
    theta_pairs: Sequence[Tuple[int, int]],
    cfg: RolloutConfig = RolloutConfig(),
    jobs: int = 1,
) -> Tuple[List[TrajectoryBundle], List[int]]:
    """Forward rollouts of many initial conditions, in input order.

    Returns:
        (bundles that completed, case ids that failed to integrate).
    """
    def run(case: int) -> Optional[TrajectoryBundle]:
        try:
            return forward_rollout(ens, initial_states[case], float(start_times[case]), theta_pairs[case], cfg, case_id=case)
        except IntegrationError as exc:
            logger.warning("Rollout %d skipped: %s (t=%s)", case, exc, exc.failure_time)
            return None

    cases = range(len(initial_states))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, cases))
    else:
        results = [run(case) for case in cases]
    bundles = [bundle for bundle in results if bundle is not None]
    failures = [case for case, bundle in zip(cases, results) if bundle is None]
    return bundles, failures


def bundle_rows(bundle: TrajectoryBundle, game: DifferentialGame) -> List[Dict[str, object]]:
    """Trajectory CSV rows; costates converted to the global state order."""
    costates = bundle.backward_costates if bundle.backward_costates is not None else bundle.forward_costates
    rows = []
    for k, t in enumerate(bundle.times):
        row: Dict[str, object] = {
            "case_id": bundle.case_id, "theta1": bundle.thetas[0], "theta2": bundle.thetas[1], "t": float(t),
        }
        row.update(zip(("d1", "v1", "d2", "v2"), (float(x) for x in bundle.states[k])))
        row["u1"], row["u2"] = float(bundle.controls[k, 0]), float(bundle.controls[k, 1])
        for player in (1, 2):
            lam = np.full(4, np.nan) if costates is None else game.to_player_frame(costates[k, player - 1], player)
            for name, value in zip(("d1", "v1", "d2", "v2"), lam):
                row[f"lam{player}_{name}"] = float(value)
        values = bundle.values[k] if bundle.values is not None else (np.nan, np.nan)
        row["V1"], row["V2"] = float(values[0]), float(values[1])
        row["in_bounds"] = int(bool(bundle.in_bounds[k]))
        rows.append(row)
    return rows
