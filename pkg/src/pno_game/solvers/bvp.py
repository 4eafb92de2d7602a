"""
Open-loop equilibria from the PMP two-point boundary-value problem.

Unknowns are both players' initial costates (8 values). A shot integrates
states, costates and running costs together to T; the residual is
lambda_i(T) - lambda_i^terminal(x(T)) stacked over players. The penalty is
switched on gradually (continuation in b), each level warm-started from the
previous one, level 0 from the closed-form unconstrained solution.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import BvpConvergenceError, IntegrationError
from ..game.intersection import GameGeometry, IntersectionGame
from .integrator import rk45_integrate
from .rollout import RolloutConfig, TrajectoryBundle, backward_value

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BvpConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    tolerance: float = 1e-6
    max_newton_iters: int = 50
    max_backtracks: int = 30
    fd_step: float = 1e-6
    restarts: int = 5
    restart_scale: float = 0.5
    continuation_levels: int = 8
    #: Run every restart at the final level and keep the largest value sum.
    exhaustive: bool = False
    seed: int = 0


@dataclass(frozen=True)
class ContinuationSchedule:
    """Penalty magnitudes b_0 = 0 < b_1 < ... < b_final."""

    levels: Tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(b) for b in self.levels)
        if not levels or levels[0] != 0.0 or any(b2 <= b1 for b1, b2 in zip(levels, levels[1:])):
            raise ValueError(f"Continuation levels must start at 0 and increase strictly: {levels}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def geometric(cls, b: float, count: int = 8) -> "ContinuationSchedule":
        """0 followed by ``count - 1`` geometrically spaced levels from b/1e6 to b."""
        if b <= 0 or count < 2:
            return cls((0.0,))
        return cls((0.0, *np.geomspace(b * 1e-6, b, count - 1)))

    @property
    def final(self) -> float:
        return self.levels[-1]


@dataclass
class LevelTrace:
    b: float
    start_residual: float
    final_residual: float
    iterations: int
    restarts_used: int = 0


@dataclass(frozen=True, eq=False)
class BvpSolution:
    bundle: TrajectoryBundle
    residual_norm: float
    converged: bool
    initial_costates: np.ndarray
    trace: List[LevelTrace] = field(default_factory=list)
    multiplicity: int = 1

    def require(self) -> "BvpSolution":
        if not self.converged:
            raise BvpConvergenceError(
                f"Shooting did not converge for case {self.bundle.case_id}", best_residual=self.residual_norm
            )
        return self


class ShootingProblem:
    """Shooting residual for one initial condition and penalty level."""

    def __init__(self, game: IntersectionGame, x0: Sequence[float], t0: float, thetas: Sequence[int], cfg: BvpConfig):
        self.game = game
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.t0 = float(t0)
        self.thetas = game.validate_thetas(thetas)
        self.cfg = cfg

    def field(self, t: float, y: np.ndarray) -> np.ndarray:
        game = self.game
        state, lam1, lam2 = y[:4], y[4:8], y[8:12]
        u1, u2 = game.optimal_control(lam1[1]), game.optimal_control(lam2[1])
        return np.concatenate([
            game.dynamics(state, u1, u2),
            game.costate_dynamics(lam1, state, self.thetas[0], 1),
            game.costate_dynamics(lam2, state, self.thetas[1], 2),
            game.running_cost(state, u1, u2, self.thetas),
        ])

    def shoot(self, z: np.ndarray, grid: Optional[np.ndarray] = None):
        y0 = np.concatenate([self.x0, np.asarray(z, dtype=np.float64), np.zeros(2)])
        return rk45_integrate(self.field, y0, (self.t0, self.game.horizon), grid, self.cfg.rtol, self.cfg.atol)

    def residual(self, z: np.ndarray) -> np.ndarray:
        terminal = self.shoot(z).values[-1]
        target = np.concatenate([self.game.terminal_costate(terminal[:4], player) for player in (1, 2)])
        return terminal[4:12] - target

    def jacobian(self, z: np.ndarray, residual: np.ndarray) -> np.ndarray:
        """Forward-difference Jacobian with step fd_step * max(1, |z_j|)."""
        jac = np.zeros((residual.size, z.size))
        for j in range(z.size):
            step = self.cfg.fd_step * max(1.0, abs(z[j]))
            dz = z.copy()
            dz[j] += step
            jac[:, j] = (self.residual(dz) - residual) / step
        return jac

    def _safe_norm(self, z: np.ndarray) -> Tuple[float, Optional[np.ndarray]]:
        try:
            res = self.residual(z)
        except IntegrationError:
            return np.inf, None
        norm = float(np.linalg.norm(res))
        return (norm, res) if np.isfinite(norm) else (np.inf, None)

    def newton(self, z0: np.ndarray) -> Tuple[np.ndarray, float, float, int]:
        """Damped Newton with Armijo backtracking on the residual norm.

        Returns:
            (z, final residual norm, starting residual norm, iterations).
        """
        z = np.asarray(z0, dtype=np.float64).copy()
        norm, res = self._safe_norm(z)
        start = norm
        iterations = 0
        while res is not None and norm > self.cfg.tolerance and iterations < self.cfg.max_newton_iters:
            iterations += 1
            try:
                jac = self.jacobian(z, res)
                step = np.linalg.lstsq(jac, -res, rcond=None)[0]
            except (IntegrationError, np.linalg.LinAlgError):
                break
            alpha = 1.0
            for _ in range(self.cfg.max_backtracks):
                trial = z + alpha * step
                trial_norm, trial_res = self._safe_norm(trial)
                if trial_res is not None and trial_norm <= (1.0 - 1e-4 * alpha) * norm:
                    z, norm, res = trial, trial_norm, trial_res
                    break
                alpha *= 0.5
            else:
                break
        return z, norm, start, iterations


def _level_game(game: IntersectionGame, b: float) -> IntersectionGame:
    return IntersectionGame(replace(game.geometry, b=float(b)))


def _bundle_from_shot(
    problem: ShootingProblem, z: np.ndarray, rollout_cfg: RolloutConfig, case_id: int
) -> TrajectoryBundle:
    game = problem.game
    grid = rollout_cfg.time_grid(problem.t0, game.horizon)
    solution = problem.shoot(z, grid)
    states = solution.values[:, :4]
    costates = solution.values[:, 4:12].reshape(-1, 2, 4)
    controls = game.optimal_control(costates[:, :, 1])
    accumulated = solution.values[:, 12:14]
    values = backward_value(game, grid, states, controls, problem.thetas, accumulated_cost=accumulated)

    def state_path(t):
        return solution(t)[..., :4]

    def control_path(t):
        return game.optimal_control(solution(t)[..., [5, 9]])

    return TrajectoryBundle(
        times=grid,
        states=states,
        controls=controls,
        thetas=problem.thetas,
        in_bounds=rollout_cfg.in_bounds(states),
        forward_costates=costates,
        backward_costates=costates.copy(),
        values=values,
        accumulated_cost=accumulated,
        state_path=state_path,
        control_path=control_path,
        case_id=case_id,
    )


def analytic_costates(x0: Sequence[float], t0: float, geometry: GameGeometry) -> np.ndarray:
    """Initial costates (2, 4) of the penalty-free game when no control clips."""
    x0 = np.asarray(x0, dtype=np.float64)
    tau = geometry.T - t0
    lam = np.zeros((2, 4))
    for idx, v0 in enumerate((x0[1], x0[3])):
        terminal_lam_v = (-2.0 * (v0 - geometry.v_bar) - geometry.mu * tau ** 2 / 2.0) / (1.0 + tau)
        lam[idx, 0] = geometry.mu
        lam[idx, 1] = terminal_lam_v + geometry.mu * tau
    return lam


def analytic_unconstrained(
    x0: Sequence[float],
    t0: float,
    game: IntersectionGame,
    thetas: Sequence[int] = (1, 1),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    cfg: BvpConfig = BvpConfig(),
    case_id: int = 0,
) -> BvpSolution:
    """Closed-form equilibrium of the game with b = 0.

    lambda_d = mu, lambda_v(t) = lambda_v(T) + mu (T - t), u = lambda_v / 2,
    with lambda_v(T) = (-2 (v0 - v_bar) - mu tau^2 / 2) / (1 + tau), tau = T - t0.
    When the control would clip anywhere on [t0, T] the linear system no
    longer holds and the b = 0 shooting problem is solved instead.
    """
    geometry = replace(game.geometry, b=0.0)
    free_game = IntersectionGame(geometry)
    lam0 = analytic_costates(x0, t0, geometry)
    tau = geometry.T - t0
    # u is affine in t, so checking both ends is enough
    u_start = lam0[:, 1] / 2.0
    u_end = (lam0[:, 1] - geometry.mu * tau) / 2.0
    lo, hi = free_game.control_bounds
    if np.any(np.minimum(u_start, u_end) < lo) or np.any(np.maximum(u_start, u_end) > hi):
        logger.debug("Analytic solution clips for x0=%s; solving b=0 shooting problem", x0)
        return solve_bvp(x0, t0, thetas, ContinuationSchedule((0.0,)), free_game, cfg, rollout_cfg, case_id)

    x0 = np.asarray(x0, dtype=np.float64)
    grid = rollout_cfg.time_grid(t0, geometry.T)
    s = grid - t0
    mu = geometry.mu
    states = np.zeros((grid.size, 4))
    costates = np.zeros((grid.size, 2, 4))
    accumulated = np.zeros((grid.size, 2))
    for idx in range(2):
        d0, v0 = x0[2 * idx], x0[2 * idx + 1]
        alpha = (lam0[idx, 1]) / 2.0
        beta = mu / 2.0
        states[:, 2 * idx] = d0 + v0 * s + alpha * s ** 2 / 2.0 - beta * s ** 3 / 6.0
        states[:, 2 * idx + 1] = v0 + alpha * s - beta * s ** 2 / 2.0
        costates[:, idx, 0] = mu
        costates[:, idx, 1] = lam0[idx, 1] - mu * s
        accumulated[:, idx] = alpha ** 2 * s - alpha * beta * s ** 2 + beta ** 2 * s ** 3 / 3.0
    controls = costates[:, :, 1] / 2.0
    pair = free_game.validate_thetas(thetas)
    values = backward_value(free_game, grid, states, controls, pair, accumulated_cost=accumulated)
    terminal = np.concatenate([free_game.terminal_costate(states[-1], player) for player in (1, 2)])
    residual = float(np.linalg.norm(costates[-1].reshape(8) - terminal))
    alphas, beta = lam0[:, 1] / 2.0, mu / 2.0

    def state_path(t):
        r = np.asarray(t, dtype=np.float64)[..., None] - t0
        d = x0[[0, 2]] + x0[[1, 3]] * r + alphas * r ** 2 / 2.0 - beta * r ** 3 / 6.0
        v = x0[[1, 3]] + alphas * r - beta * r ** 2 / 2.0
        return np.stack([d[..., 0], v[..., 0], d[..., 1], v[..., 1]], axis=-1)

    def control_path(t):
        r = np.asarray(t, dtype=np.float64)[..., None] - t0
        return alphas - beta * r

    bundle = TrajectoryBundle(
        times=grid,
        states=states,
        controls=controls,
        thetas=pair,
        in_bounds=rollout_cfg.in_bounds(states),
        forward_costates=costates,
        backward_costates=costates.copy(),
        values=values,
        accumulated_cost=accumulated,
        state_path=state_path,
        control_path=control_path,
        case_id=case_id,
    )
    return BvpSolution(bundle, residual, True, lam0.reshape(8), [LevelTrace(0.0, residual, residual, 0)])


def _perturbed(z: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    return z + rng.normal(0.0, scale, size=z.size) * np.maximum(1.0, np.abs(z))


def _distinct(candidates: List[Tuple[np.ndarray, float]], tol: float = 1e-4) -> List[Tuple[np.ndarray, float]]:
    kept: List[Tuple[np.ndarray, float]] = []
    for z, norm in candidates:
        if all(np.linalg.norm(z - other) > tol * max(1.0, np.linalg.norm(other)) for other, _ in kept):
            kept.append((z, norm))
    return kept


def solve_bvp(
    x0: Sequence[float],
    t0: float,
    thetas: Sequence[int],
    schedule: ContinuationSchedule,
    game: IntersectionGame,
    cfg: BvpConfig = BvpConfig(),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    case_id: int = 0,
) -> BvpSolution:
    """Shooting with penalty continuation and perturbed restarts.

    Returns a solution flagged ``converged=False`` (with the best residual
    reached) when a level cannot be solved after all restarts.
    """
    rng = np.random.default_rng([cfg.seed, case_id])
    z = analytic_costates(x0, t0, game.geometry).reshape(8)
    trace: List[LevelTrace] = []
    problem = None
    multiplicity = 1
    final_norm = np.inf

    for level_idx, b in enumerate(schedule.levels):
        problem = ShootingProblem(_level_game(game, b), x0, t0, thetas, cfg)
        is_final = level_idx == len(schedule.levels) - 1
        z_new, norm, start, iterations = problem.newton(z)
        entry = LevelTrace(float(b), start, norm, iterations)
        candidates = [(z_new, norm)] if norm <= cfg.tolerance else []

        attempts = cfg.restarts if (not candidates or (is_final and cfg.exhaustive)) else 0
        for attempt in range(attempts):
            z_try, norm_try, _, iters = problem.newton(_perturbed(z, rng, cfg.restart_scale))
            entry.restarts_used = attempt + 1
            entry.iterations += iters
            if norm_try < norm:
                z_new, norm = z_try, norm_try
            if norm_try <= cfg.tolerance:
                candidates.append((z_try, norm_try))
                if not (is_final and cfg.exhaustive):
                    break

        entry.final_residual = norm
        trace.append(entry)
        logger.debug("case %d level b=%g residual %.3e -> %.3e (%d iters)", case_id, b, start, norm, entry.iterations)

        if not candidates:
            logger.warning(
                "BVP case %d failed at b=%g (best residual %.3e) x0=%s thetas=%s",
                case_id, b, norm, np.asarray(x0).tolist(), tuple(thetas),
            )
            bundle = _safe_bundle(problem, z_new, rollout_cfg, case_id)
            return BvpSolution(bundle, norm, False, z_new, trace)

        distinct = _distinct(candidates)
        if len(distinct) > 1:
            multiplicity = len(distinct)
            logger.warning("BVP case %d: %d distinct equilibria at b=%g", case_id, multiplicity, b)
            scored = [(
                _bundle_from_shot(problem, cand, rollout_cfg, case_id).values[0].sum(), cand, cand_norm
            ) for cand, cand_norm in distinct]
            _, z_new, norm = max(scored, key=lambda item: item[0])
        else:
            z_new, norm = distinct[0]
        z = z_new
        final_norm = norm

    bundle = _bundle_from_shot(problem, z, rollout_cfg, case_id)
    return BvpSolution(bundle, final_norm, True, z, trace, multiplicity)


def _safe_bundle(problem: ShootingProblem, z: np.ndarray, rollout_cfg: RolloutConfig, case_id: int) -> TrajectoryBundle:
    try:
        return _bundle_from_shot(problem, z, rollout_cfg, case_id)
    except IntegrationError:
        grid = rollout_cfg.time_grid(problem.t0, problem.game.horizon)
        states = np.tile(problem.x0, (grid.size, 1))
        return TrajectoryBundle(
            grid, states, np.zeros((grid.size, 2)), problem.thetas, rollout_cfg.in_bounds(states), case_id=case_id
        )


@dataclass(frozen=True, eq=False)
class SupervisedDataset:
    """Per-player value and costate targets on BVP trajectories.

    Records are flat arrays; costates are in the record player's own frame,
    states and thetas in the global frame.
    """

    case_ids: np.ndarray
    players: np.ndarray
    times: np.ndarray
    states: np.ndarray
    thetas: np.ndarray
    values: np.ndarray
    costates: np.ndarray
    bundles: Tuple[TrajectoryBundle, ...] = ()

    def __len__(self) -> int:
        return int(self.times.size)

    @classmethod
    def from_bundles(cls, bundles: Sequence[TrajectoryBundle]) -> "SupervisedDataset":
        columns: Dict[str, List[Any]] = {key: [] for key in ("case", "player", "t", "x", "theta", "v", "lam")}
        for bundle in bundles:
            for player in (1, 2):
                k = bundle.times.size
                columns["case"].append(np.full(k, bundle.case_id))
                columns["player"].append(np.full(k, player))
                columns["t"].append(bundle.times)
                columns["x"].append(bundle.states)
                columns["theta"].append(np.tile(bundle.thetas, (k, 1)))
                columns["v"].append(bundle.values[:, player - 1])
                columns["lam"].append(bundle.backward_costates[:, player - 1])
        if not bundles:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, 4)),
                       np.zeros((0, 2), int), np.zeros(0), np.zeros((0, 4)))
        return cls(
            np.concatenate(columns["case"]),
            np.concatenate(columns["player"]),
            np.concatenate(columns["t"]),
            np.concatenate(columns["x"]),
            np.concatenate(columns["theta"]).astype(np.int64),
            np.concatenate(columns["v"]),
            np.concatenate(columns["lam"]),
            tuple(bundles),
        )

    @classmethod
    def from_rows(cls, rows: Sequence[Dict[str, Any]], game: IntersectionGame) -> "SupervisedDataset":
        """Rebuild the records from trajectory CSV rows (costates stored in global order)."""
        columns: Dict[str, List[Any]] = {key: [] for key in ("case", "player", "t", "x", "theta", "v", "lam")}
        for row in rows:
            state = np.array([float(row[name]) for name in ("d1", "v1", "d2", "v2")])
            for player in (1, 2):
                lam = np.array([float(row[f"lam{player}_{name}"]) for name in ("d1", "v1", "d2", "v2")])
                columns["case"].append(int(row["case_id"]))
                columns["player"].append(player)
                columns["t"].append(float(row["t"]))
                columns["x"].append(state)
                columns["theta"].append((int(row["theta1"]), int(row["theta2"])))
                columns["v"].append(float(row[f"V{player}"]))
                columns["lam"].append(game.to_player_frame(lam, player))
        return cls(
            np.array(columns["case"], dtype=np.int64),
            np.array(columns["player"], dtype=np.int64),
            np.array(columns["t"], dtype=np.float64),
            np.array(columns["x"], dtype=np.float64).reshape(-1, 4),
            np.array(columns["theta"], dtype=np.int64).reshape(-1, 2),
            np.array(columns["v"], dtype=np.float64),
            np.array(columns["lam"], dtype=np.float64).reshape(-1, 4),
        )

    def subset(self, mask: np.ndarray) -> "SupervisedDataset":
        return SupervisedDataset(
            self.case_ids[mask], self.players[mask], self.times[mask], self.states[mask],
            self.thetas[mask], self.values[mask], self.costates[mask], self.bundles,
        )

    def for_player(self, player: int) -> "SupervisedDataset":
        return self.subset(self.players == player)

    def shuffled(self, seed: int) -> "SupervisedDataset":
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(order)


@dataclass(frozen=True)
class DatasetReport:
    requested: int
    converged: int
    failed_cases: Tuple[int, ...]
    seed: int
    geometry_hash: str
    multiplicity_events: int = 0

    @property
    def convergence_rate(self) -> float:
        return self.converged / self.requested if self.requested else 0.0

    def manifest(self, cases: Sequence[Dict[str, Any]] = ()) -> Dict[str, Any]:
        return {
            "requested": self.requested,
            "converged": self.converged,
            "failed": len(self.failed_cases),
            "convergence_rate": float(self.convergence_rate),
            "multiplicity_events": self.multiplicity_events,
            "seed": self.seed,
            "geometry_hash": self.geometry_hash,
            "cases": list(cases),
        }


def sample_box(
    rng: np.random.Generator, count: int, d_bounds: Sequence[float], v_bounds: Sequence[float]
) -> np.ndarray:
    """Uniform joint states (count, 4) with positions and speeds in the given box."""
    d = rng.uniform(d_bounds[0], d_bounds[1], size=(count, 2))
    v = rng.uniform(v_bounds[0], v_bounds[1], size=(count, 2))
    return np.stack([d[:, 0], v[:, 0], d[:, 1], v[:, 1]], axis=1)


def generate_dataset(
    game: IntersectionGame,
    count: int,
    theta_set: Sequence[Tuple[int, int]],
    seed: int,
    d_bounds: Sequence[float] = (15.0, 20.0),
    v_bounds: Sequence[float] = (18.0, 25.0),
    cfg: BvpConfig = BvpConfig(),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    jobs: int = 1,
) -> Tuple[SupervisedDataset, DatasetReport, List[BvpSolution]]:
    """Solve ``count`` BVPs from uniform initial states at t0 = 0.

    Theta pairs are assigned round-robin from ``theta_set``. Failed cases are
    logged and left out of the dataset.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    initial_states = sample_box(rng, count, d_bounds, v_bounds)
    pairs = [tuple(theta_set[i % len(theta_set)]) for i in range(count)]
    schedule = ContinuationSchedule.geometric(game.geometry.b, cfg.continuation_levels)
    cfg = replace(cfg, seed=seed)

    def run(case: int) -> BvpSolution:
        return solve_bvp(initial_states[case], 0.0, pairs[case], schedule, game, cfg, rollout_cfg, case)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            solutions = list(pool.map(run, range(count)))
    else:
        solutions = [run(case) for case in range(count)]

    converged = []
    failed = []
    for solution in solutions:
        try:
            converged.append(solution.require().bundle)
        except BvpConvergenceError as exc:
            logger.warning("%s (best residual %.3e); excluded", exc, exc.best_residual)
            failed.append(solution.bundle.case_id)

    report = DatasetReport(
        requested=count,
        converged=len(converged),
        failed_cases=tuple(failed),
        seed=seed,
        geometry_hash=game.geometry.geometry_hash(),
        multiplicity_events=sum(1 for s in solutions if s.multiplicity > 1),
    )
    logger.info("BVP dataset: %d/%d converged (%.1f%%)", report.converged, count, 100.0 * report.convergence_rate)
    return SupervisedDataset.from_bundles(converged), report, solutions
