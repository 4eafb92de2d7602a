"""
Safety tables: collision percentages per (theta1, theta2) and method.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from ..exceptions import PnoError
from ..game.intersection import THETA_SPACE, IntersectionGame
from ..models.operator import OperatorEnsemble
from ..solvers.bvp import BvpConfig, BvpSolution, ContinuationSchedule, sample_box, solve_bvp
from ..solvers.rollout import RolloutConfig
from .simulate import PolicyKind, SimCase, SimConfig, closed_loop_sim, detect_collision

logger = logging.getLogger(__name__)

SAFETY_COLUMNS = ("theta1", "theta2", "method", "variant", "n_cases", "n_collisions", "pct", "n_failures")
GROUND_TRUTH = "GT"
REFERENCE_THETAS = (1, 1)

T = TypeVar("T")
R = TypeVar("R")


class Variant(str, Enum):
    WITH_INEVITABLE = "with-inevitable"
    WITHOUT_INEVITABLE = "without-inevitable"
    CENSUS = "census"


@dataclass(frozen=True, eq=False)
class MethodSpec:
    """A column of the safety table: a policy kind and, for learned policies, its checkpoint."""

    label: str
    kind: PolicyKind
    ensemble: Optional[OperatorEnsemble] = None

    @classmethod
    def ground_truth(cls) -> "MethodSpec":
        return cls(GROUND_TRUTH, PolicyKind.BVP_OPENLOOP)

    @property
    def is_ground_truth(self) -> bool:
        return self.kind is PolicyKind.BVP_OPENLOOP


@dataclass(frozen=True)
class SafetyCell:
    theta1: int
    theta2: int
    method: str
    variant: str
    n_cases: int
    n_collisions: int
    n_failures: int = 0
    flags: Tuple[int, ...] = field(default=(), repr=False, compare=False)

    @property
    def pct(self) -> float:
        """Collision percentage over the cases that completed."""
        completed = self.n_cases - self.n_failures
        return 100.0 * self.n_collisions / completed if completed else 0.0

    def row(self) -> Dict[str, object]:
        return {
            "theta1": self.theta1,
            "theta2": self.theta2,
            "method": self.method,
            "variant": self.variant,
            "n_cases": self.n_cases,
            "n_collisions": self.n_collisions,
            "pct": round(self.pct, 6),
            "n_failures": self.n_failures,
        }


@dataclass
class SafetyReport:
    variant: Variant
    seed: int
    case_count: int
    cells: List[SafetyCell] = field(default_factory=list)
    excluded_inevitable: int = 0
    reference_failures: int = 0

    def rows(self) -> List[Dict[str, object]]:
        return [cell.row() for cell in self.cells]

    def cell(self, thetas: Sequence[int], method: str) -> SafetyCell:
        for cell in self.cells:
            if (cell.theta1, cell.theta2) == tuple(thetas) and cell.method == method:
                return cell
        raise KeyError(f"No safety cell for thetas={tuple(thetas)} method={method}")

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(cell.method for cell in self.cells))


@dataclass(frozen=True)
class FilterResult:
    states: np.ndarray
    kept: Tuple[int, ...]
    inevitable: Tuple[int, ...]
    failed: Tuple[int, ...]


def sample_test_cases(
    seed: int, count: int, d_bounds: Sequence[float] = (15.0, 20.0), v_bounds: Sequence[float] = (18.0, 25.0)
) -> np.ndarray:
    """Initial joint states (count, 4) drawn uniformly from the test box."""
    return sample_box(np.random.default_rng(seed), count, d_bounds, v_bounds)


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """``map`` over a thread pool; results keep input order."""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _solve_reference(
    x0: np.ndarray, thetas: Tuple[int, int], game: IntersectionGame, cfg: BvpConfig,
    rollout_cfg: RolloutConfig, case_id: int,
) -> BvpSolution:
    schedule = ContinuationSchedule.geometric(game.geometry.b, cfg.continuation_levels)
    return solve_bvp(x0, 0.0, thetas, schedule, game, cfg, rollout_cfg, case_id)


def filter_inevitable(
    states: np.ndarray,
    game: IntersectionGame,
    cfg: BvpConfig = BvpConfig(),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    sim_cfg: SimConfig = SimConfig(),
    jobs: int = 1,
) -> FilterResult:
    """Drop initial states whose theta=(1, 1) equilibrium trajectory collides.

    Cases whose reference BVP does not converge are excluded too and counted
    under ``failed``.
    """
    states = np.asarray(states, dtype=np.float64).reshape(-1, 4)

    def classify(case: int) -> str:
        solution = _solve_reference(states[case], REFERENCE_THETAS, game, cfg, rollout_cfg, case)
        if not solution.converged:
            return "failed"
        hit = detect_collision(
            solution.bundle, REFERENCE_THETAS, game, sim_cfg.collision_substeps, sim_cfg.collision_tolerance
        )
        return "inevitable" if hit.collided else "kept"

    labels = parallel_map(classify, list(range(len(states))), jobs)
    kept = tuple(i for i, label in enumerate(labels) if label == "kept")
    inevitable = tuple(i for i, label in enumerate(labels) if label == "inevitable")
    failed = tuple(i for i, label in enumerate(labels) if label == "failed")
    if failed:
        logger.warning("%d reference BVP(s) did not converge; cases %s excluded", len(failed), list(failed))
    logger.info("Inevitable-collision filter kept %d of %d cases", len(kept), len(states))
    return FilterResult(states[list(kept)], kept, inevitable, failed)


def _run_case(
    method: MethodSpec,
    x0: np.ndarray,
    thetas: Tuple[int, int],
    case_id: int,
    game: IntersectionGame,
    cfg: BvpConfig,
    rollout_cfg: RolloutConfig,
    sim_cfg: SimConfig,
) -> Optional[int]:
    """Collision flag of one case, or None when the case failed."""
    case = SimCase(tuple(x0), thetas, (method.kind, method.kind), rollout_cfg.dt_grid, 0.0, case_id)
    try:
        reference = None
        if method.is_ground_truth:
            solution = _solve_reference(x0, thetas, game, cfg, rollout_cfg, case_id)
            if not solution.converged:
                return None
            reference = solution.bundle
        bundle = closed_loop_sim(case, game, method.ensemble, reference, sim_cfg)
    except PnoError as exc:
        logger.warning("Case %d (%s, thetas=%s) failed: %s", case_id, method.label, thetas, exc)
        return None
    hit = detect_collision(bundle, thetas, game, sim_cfg.collision_substeps, sim_cfg.collision_tolerance)
    return int(hit.collided)


def safety_table(
    states: np.ndarray,
    methods: Sequence[MethodSpec],
    variant: Variant,
    game: IntersectionGame,
    seed: int = 0,
    theta_pairs: Optional[Sequence[Tuple[int, int]]] = None,
    cfg: BvpConfig = BvpConfig(),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    sim_cfg: SimConfig = SimConfig(),
    jobs: int = 1,
) -> SafetyReport:
    """Collision percentages of every method on every theta pair.

    ``without-inevitable`` first removes the cases that collide under the
    theta=(1, 1) equilibrium; ``census`` reports only the ground truth.
    Failed cases are counted per cell and left out of the percentage. Cases
    keep their position in ``states`` as case id after filtering.
    """
    variant = Variant(variant)
    states = np.asarray(states, dtype=np.float64).reshape(-1, 4)
    pairs = [tuple(p) for p in (theta_pairs or [(a, b) for a in THETA_SPACE for b in THETA_SPACE])]
    cfg = replace(cfg, seed=seed)
    report = SafetyReport(variant, seed, len(states))
    case_ids = list(range(len(states)))

    if variant is Variant.CENSUS:
        methods = [MethodSpec.ground_truth()]
    if variant is Variant.WITHOUT_INEVITABLE:
        filtered = filter_inevitable(states, game, cfg, rollout_cfg, sim_cfg, jobs)
        states = filtered.states
        case_ids = list(filtered.kept)
        report.excluded_inevitable = len(filtered.inevitable)
        report.reference_failures = len(filtered.failed)
    if not len(states):
        raise PnoError("No test cases left to evaluate")
    if not methods:
        raise PnoError("No methods to evaluate")

    for thetas in pairs:
        pair = game.validate_thetas(thetas)
        for method in methods:
            flags = parallel_map(
                lambda k: _run_case(method, states[k], pair, case_ids[k], game, cfg, rollout_cfg, sim_cfg),
                list(range(len(states))),
                jobs,
            )
            completed = [flag for flag in flags if flag is not None]
            cell = SafetyCell(
                theta1=pair[0],
                theta2=pair[1],
                method=method.label,
                variant=variant.value,
                n_cases=len(flags),
                n_collisions=int(sum(completed)),
                n_failures=len(flags) - len(completed),
                flags=tuple(-1 if flag is None else flag for flag in flags),
            )
            report.cells.append(cell)
            logger.info(
                "thetas=%s %s: %d/%d collisions (%.2f%%), %d failed",
                pair, method.label, cell.n_collisions, cell.n_cases - cell.n_failures, cell.pct, cell.n_failures,
            )
    return report
