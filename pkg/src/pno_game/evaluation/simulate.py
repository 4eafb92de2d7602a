"""
Closed-loop simulation and collision detection.

Feedback policies are sampled at the start of each dt step and held until the
next one; open-loop BVP controls are replayed continuously. Each step is an
RK45 solve of the dynamics augmented with both players' running costs.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import CheckpointMismatchError, DomainError, PnoError
from ..game.intersection import IntersectionGame
from ..models.operator import OperatorEnsemble, PolicySource
from ..solvers.integrator import DenseTrajectory, rk45_integrate
from ..solvers.rollout import RolloutConfig, TrajectoryBundle, backward_value

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    PNO_VALUE_GRADIENT = "pno-value-gradient"
    PNO_COSTATE = "pno-costate"
    HYBRID = "hybrid"
    BVP_OPENLOOP = "bvp-openloop"
    ZERO = "zero"

    @property
    def operator_source(self) -> Optional[PolicySource]:
        if self is PolicyKind.PNO_COSTATE:
            return PolicySource.COSTATE
        if self in (PolicyKind.PNO_VALUE_GRADIENT, PolicyKind.HYBRID):
            return PolicySource.VALUE_GRADIENT
        return None


@dataclass(frozen=True)
class SimCase:
    x0: Tuple[float, float, float, float]
    thetas: Tuple[int, int]
    sources: Tuple[PolicyKind, PolicyKind] = (PolicyKind.PNO_COSTATE, PolicyKind.PNO_COSTATE)
    dt: float = 0.1
    t0: float = 0.0
    case_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(x) for x in self.x0))
        object.__setattr__(self, "thetas", (int(self.thetas[0]), int(self.thetas[1])))
        object.__setattr__(self, "sources", tuple(PolicyKind(s) for s in self.sources))

    def swapped(self) -> "SimCase":
        """The same case with the players' roles exchanged."""
        x = self.x0
        return SimCase(
            (x[2], x[3], x[0], x[1]), (self.thetas[1], self.thetas[0]),
            (self.sources[1], self.sources[0]), self.dt, self.t0, self.case_id,
        )


@dataclass(frozen=True)
class SimConfig:
    rtol: float = 1e-9
    atol: float = 1e-11
    d_bounds: Tuple[float, float] = (15.0, 105.0)
    v_bounds: Tuple[float, float] = (15.0, 32.0)
    collision_substeps: int = 100
    collision_tolerance: float = 1e-3

    def grid_config(self, dt: float) -> RolloutConfig:
        return RolloutConfig(
            dt_grid=dt, rk_rel_tol=self.rtol, rk_abs_tol=self.atol,
            d_bounds=self.d_bounds, v_bounds=self.v_bounds,
        )


@dataclass(frozen=True, eq=False)
class Policy:
    """Control of one player: ``control(t, state)``.

    Feedback policies are sampled once per step (zero-order hold); open-loop
    policies are evaluated at every integrator stage.
    """

    control: Callable[[float, np.ndarray], float]
    feedback: bool = True
    label: str = ""


def make_policy(
    kind: PolicyKind,
    player: int,
    thetas: Tuple[int, int],
    game: IntersectionGame,
    ensemble: Optional[OperatorEnsemble] = None,
    reference: Optional[TrajectoryBundle] = None,
) -> Policy:
    kind = PolicyKind(kind)
    if kind is PolicyKind.ZERO:
        return Policy(lambda t, state: 0.0, label=kind.value)

    if kind is PolicyKind.BVP_OPENLOOP:
        if reference is None or reference.control_path is None:
            raise PnoError("bvp-openloop replay needs a BVP solution with a control path")
        lo, hi = game.control_bounds
        path = reference.control_path

        def replay(t: float, state: np.ndarray) -> float:
            return float(np.clip(path(t)[player - 1], lo, hi))

        return Policy(replay, feedback=False, label=kind.value)

    if ensemble is None:
        raise PnoError(f"Policy '{kind.value}' needs a trained operator checkpoint")
    source = kind.operator_source
    if source is PolicySource.COSTATE and not ensemble.has_costate:
        raise PnoError(f"Policy '{kind.value}' needs costate networks; the checkpoint has none")

    def feedback(t: float, state: np.ndarray) -> float:
        return ensemble.policy(source, state, t, thetas, player)

    return Policy(feedback, label=kind.value)


def _check_compatible(ensemble: Optional[OperatorEnsemble], game: IntersectionGame) -> None:
    if ensemble is None:
        return
    expected, found = game.geometry.geometry_hash(), ensemble.game.geometry.geometry_hash()
    if expected != found:
        raise CheckpointMismatchError(
            f"Checkpoint geometry {found} does not match the simulation geometry {expected}"
        )


class PiecewisePath:
    """Dense state path stitched from per-step integrator solutions."""

    def __init__(self, breaks: np.ndarray, pieces: Sequence[DenseTrajectory], width: int = 4):
        self.breaks = np.asarray(breaks, dtype=np.float64)
        self.pieces = list(pieces)
        self.width = width

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        flat = np.atleast_1d(t).ravel()
        index = np.clip(np.searchsorted(self.breaks, flat, side="right") - 1, 0, len(self.pieces) - 1)
        out = np.empty((flat.size, self.width))
        for j in np.unique(index):
            sel = index == j
            out[sel] = self.pieces[j](flat[sel])[..., : self.width]
        return out.reshape(t.shape + (self.width,))


def closed_loop_sim(
    case: SimCase,
    game: IntersectionGame,
    ensemble: Optional[OperatorEnsemble] = None,
    reference: Optional[TrajectoryBundle] = None,
    cfg: SimConfig = SimConfig(),
) -> TrajectoryBundle:
    """Simulate one case with each player's configured policy.

    Args:
        ensemble: Operator checkpoint for the pno-*/hybrid sources.
        reference: BVP solution replayed by the bvp-openloop source.

    Returns:
        TrajectoryBundle with states, applied controls, values from the
        accumulated running cost and a dense piecewise state path.

    Raises:
        CheckpointMismatchError: the ensemble was built for another geometry.
        DomainError: dt does not divide [t0, T].
        IntegrationError: a step failed to integrate.
    """
    _check_compatible(ensemble, game)
    if not 0.0 <= case.t0 < game.horizon:
        raise DomainError(f"Simulation start time {case.t0} not in [0, {game.horizon})")
    grid_cfg = cfg.grid_config(case.dt)
    grid = grid_cfg.time_grid(case.t0, game.horizon)
    pair = game.validate_thetas(case.thetas)
    policies = [
        make_policy(kind, player, pair, game, ensemble, reference)
        for player, kind in zip((1, 2), case.sources)
    ]

    def applied(t: float, state: np.ndarray, held: List[Optional[float]]) -> np.ndarray:
        return np.array([
            h if h is not None else policy.control(t, state)
            for policy, h in zip(policies, held)
        ])

    y = np.concatenate([np.asarray(case.x0, dtype=np.float64), np.zeros(2)])
    samples = np.zeros((grid.size, 6))
    controls = np.zeros((grid.size, 2))
    samples[0] = y
    pieces = []
    for k in range(grid.size - 1):
        t_start, t_end = grid[k], grid[k + 1]
        held = [policy.control(t_start, y[:4]) if policy.feedback else None for policy in policies]
        controls[k] = applied(t_start, y[:4], held)

        def rhs(t: float, z: np.ndarray, held=held) -> np.ndarray:
            u = applied(t, z[:4], held)
            return np.concatenate([game.dynamics(z[:4], u[0], u[1]), game.running_cost(z[:4], u[0], u[1], pair)])

        piece = rk45_integrate(rhs, y, (t_start, t_end), (t_start, t_end), cfg.rtol, cfg.atol)
        pieces.append(piece)
        y = piece.values[-1]
        samples[k + 1] = y
    controls[-1] = [policy.control(grid[-1], y[:4]) for policy in policies]

    states = samples[:, :4]
    accumulated = samples[:, 4:]
    values = backward_value(game, grid, states, controls, pair, accumulated_cost=accumulated)
    return TrajectoryBundle(
        times=grid,
        states=states,
        controls=controls,
        thetas=pair,
        in_bounds=grid_cfg.in_bounds(states),
        values=values,
        accumulated_cost=accumulated,
        state_path=PiecewisePath(grid, pieces),
        case_id=case.case_id,
    )


@dataclass(frozen=True)
class CollisionResult:
    collided: bool
    time: Optional[float] = None

    def __int__(self) -> int:
        return int(self.collided)


def detect_collision(
    bundle: TrajectoryBundle,
    thetas: Sequence[int],
    game: IntersectionGame,
    substeps: int = 100,
    tolerance: float = 1e-3,
) -> CollisionResult:
    """First time both vehicles sit in their theta-scaled zones.

    The dense path is scanned at dt / ``substeps``; the first hit is refined
    by bisection against the last clear sample until the bracket is below
    ``tolerance``. A hit at the first sample is reported at t0.
    """
    pair = game.validate_thetas(thetas)
    times = bundle.times
    fine = np.linspace(times[0], times[-1], (times.size - 1) * substeps + 1)
    hits = np.asarray(game.collision_indicator(bundle.state_at(fine), pair))
    if not hits.any():
        return CollisionResult(False)
    first = int(np.argmax(hits))
    if first == 0:
        return CollisionResult(True, float(fine[0]))
    clear, hit = fine[first - 1], fine[first]
    while hit - clear > tolerance:
        middle = 0.5 * (clear + hit)
        if game.collision_indicator(bundle.state_at(middle), pair):
            hit = middle
        else:
            clear = middle
    return CollisionResult(True, float(hit))


def fine_scan(bundle: TrajectoryBundle, thetas: Sequence[int], game: IntersectionGame, substeps: int = 100) -> bool:
    """Brute-force per-sample indicator scan at dt / ``substeps``."""
    pair = game.validate_thetas(thetas)
    for k in range(bundle.times.size - 1):
        for t in np.linspace(bundle.times[k], bundle.times[k + 1], substeps + 1):
            if game.collision_indicator(bundle.state_at(t), pair):
                return True
    return False
