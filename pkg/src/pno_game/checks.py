"""
Property and oracle suite behind ``pno-game check``.

Each check builds what it needs from a seed, runs it and reports a
CheckResult. The default sizes finish in seconds; ``full`` runs the
acceptance-scale sample counts.
"""
import logging
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .evaluation.safety import REFERENCE_THETAS, MethodSpec, Variant, filter_inevitable, safety_table, sample_test_cases
from .evaluation.simulate import PolicyKind, SimCase, SimConfig, closed_loop_sim, detect_collision, fine_scan
from .exceptions import PnoError
from .game.intersection import THETA_SPACE, GameGeometry, IntersectionGame
from .models.autodiff_net import ActivationKind, NetworkShape, forward, init_network, input_gradient, parameter_gradient
from .models.checkpoint import decode_checkpoint, encode_checkpoint
from .models.operator import LatticeSpec, Normalizer, OperatorEnsemble
from .pipeline import build_ensemble, build_sim_config
from .solvers.bvp import BvpConfig, ContinuationSchedule, analytic_unconstrained, sample_box, solve_bvp
from .solvers.rollout import RolloutConfig, backward_value, forward_rollout, integrate_costate
from .training.sampling import SamplingBox, evolve_samples, uniform_pool
from .training.trainer import DESK_THETA_SET, TrainConfig, curriculum_time_window, pretrain, train_pno
from .utils.config import RunConfig, deep_merge

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def small_ensemble(game: IntersectionGame, seed: int = 0, activation: ActivationKind = ActivationKind()) -> OperatorEnsemble:
    """A tiny operator ensemble for property checks."""
    lattice = LatticeSpec(resolution=(5, 5))
    normalizer = Normalizer.from_box(lattice.d_bounds, lattice.v_bounds, game.horizon, 100.0, 10.0)
    return OperatorEnsemble.initialize(game, lattice, normalizer, (8, 8), 4, activation, seed)


def _relative(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def check_gradients(rng: np.random.Generator, full: bool) -> CheckResult:
    """Input and parameter gradients against central differences."""
    configs = 100
    kinds = [
        ActivationKind("tanh"), ActivationKind("sine"), ActivationKind("relu"),
        ActivationKind("tanh", adaptive=True), ActivationKind("sine", adaptive=True),
    ]
    worst = 0.0
    for n in range(configs):
        activation = kinds[n % len(kinds)]
        shape = NetworkShape(int(rng.integers(1, 6)), tuple(rng.integers(2, 9, size=rng.integers(1, 4))), int(rng.integers(1, 4)))
        params = init_network(shape, activation, int(rng.integers(0, 2**31)))
        x = rng.uniform(-1.0, 1.0, size=shape.input_dim)

        jac = input_gradient(params, x)
        fd = np.zeros_like(jac)
        for j in range(shape.input_dim):
            step = np.zeros(shape.input_dim)
            step[j] = FD_STEP
            fd[:, j] = (forward(params, x + step) - forward(params, x - step)) / (2 * FD_STEP)
        worst = max(worst, _relative(jac, fd))

        adjoint = rng.normal(size=shape.output_dim)
        grad = parameter_gradient(params, x, adjoint)
        picks = rng.choice(len(params), size=min(50, len(params)), replace=False)
        fd_params = np.zeros(picks.size)
        for i, p in enumerate(picks):
            plus, minus = params.values.copy(), params.values.copy()
            plus[p] += FD_STEP
            minus[p] -= FD_STEP
            fd_params[i] = (
                adjoint @ forward(params.with_values(plus), x) - adjoint @ forward(params.with_values(minus), x)
            ) / (2 * FD_STEP)
        worst = max(worst, _relative(grad[picks], fd_params))
    return CheckResult("gradients vs finite differences", worst <= 1e-6, f"{configs} networks, worst relative error {worst:.2e}")


def check_hamiltonian_argmax(rng: np.random.Generator, full: bool) -> CheckResult:
    game = IntersectionGame()
    samples = 10_000 if full else 200
    lo, hi = game.control_bounds
    grid = np.arange(lo, hi + 5e-5, 1e-4)
    box = SamplingBox()
    worst = -np.inf
    for _ in range(samples):
        lam = rng.normal(scale=20.0, size=4)
        state = box.sample_states(rng, 1)[0]
        player = int(rng.integers(1, 3))
        theta = int(rng.choice(THETA_SPACE))
        u_other = float(rng.uniform(lo, hi))
        _, h_star = game.maximize_hamiltonian(lam, state, theta, player, u_other)
        own = game.to_player_frame(state, player)
        c = game.penalty(state, theta, player)
        h_grid = game.hamiltonian(lam, own, grid, u_other, c)
        worst = max(worst, float(np.max(h_grid)) - h_star)
    return CheckResult("Hamiltonian argmax", worst <= 1e-9, f"{samples} samples, max grid excess {worst:.2e}")


def check_analytic_oracle(rng: np.random.Generator, full: bool) -> CheckResult:
    """b = 0 shooting against the closed-form equilibrium."""
    game = IntersectionGame(replace(GameGeometry(), b=0.0))
    cases = 100 if full else 5
    cfg = BvpConfig(rtol=1e-12, atol=1e-14, tolerance=1e-10)
    rollout_cfg = RolloutConfig(rk_rel_tol=1e-12, rk_abs_tol=1e-14)
    worst = 0.0
    for case, x0 in enumerate(sample_box(rng, cases, (15.0, 20.0), (18.0, 25.0))):
        exact = analytic_unconstrained(x0, 0.0, game, (1, 1), rollout_cfg, cfg, case)
        shot = solve_bvp(x0, 0.0, (1, 1), ContinuationSchedule((0.0,)), game, cfg, rollout_cfg, case)
        if not shot.converged:
            return CheckResult("analytic b=0 oracle", False, f"case {case} did not converge")
        worst = max(
            worst,
            float(np.max(np.abs(shot.bundle.states - exact.bundle.states))),
            float(np.max(np.abs(shot.bundle.backward_costates - exact.bundle.backward_costates))),
            float(np.max(np.abs(shot.bundle.controls - exact.bundle.controls))),
        )
    return CheckResult("analytic b=0 oracle", worst <= 1e-8, f"{cases} cases, max error {worst:.2e}")


def check_dp_consistency(rng: np.random.Generator, full: bool) -> CheckResult:
    """Accumulated-cost values against quadrature; costate backward/forward round trip."""
    game = IntersectionGame()
    ens = small_ensemble(game, int(rng.integers(0, 2**31)))
    cfg = RolloutConfig(rk_rel_tol=1e-10, rk_abs_tol=1e-12)
    rollouts = 100 if full else 5
    value_err, costate_err = 0.0, 0.0
    for case, x0 in enumerate(sample_box(rng, rollouts, (15.0, 20.0), (18.0, 25.0))):
        pair = tuple(int(t) for t in rng.choice(THETA_SPACE, size=2))
        bundle = forward_rollout(ens, x0, 0.0, pair, cfg, case_id=case)
        quadrature = backward_value(
            game, bundle.times, bundle.states, bundle.controls, pair, refinement=50,
            state_path=bundle.state_path, control_path=bundle.control_path,
        )
        scale = max(1.0, float(np.max(np.abs(bundle.values))))
        value_err = max(value_err, float(np.max(np.abs(quadrature - bundle.values))) / scale)

        lam = bundle.backward_costates
        replay = integrate_costate(
            game, bundle.state_path, lam[0], (bundle.times[0], bundle.times[-1]), bundle.times, pair, 1e-10, 1e-12
        )
        costate_err = max(costate_err, float(np.max(np.abs(replay[-1] - lam[-1]))) / max(1.0, float(np.max(np.abs(lam[-1])))))
    passed = value_err <= 1e-4 and costate_err <= 1e-6
    return CheckResult(
        "dynamic-programming consistency", passed,
        f"{rollouts} rollouts, value error {value_err:.2e}, costate round trip {costate_err:.2e}",
    )


def check_evolve_sampling(rng: np.random.Generator, full: bool) -> CheckResult:
    def residual(states: np.ndarray, times: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        return np.abs(np.sin(states.sum(axis=1) / 7.0)) + times + 0.1 * thetas.sum(axis=1)

    box = SamplingBox()
    window = (0.0, 3.0)
    pool = uniform_pool(rng, 64, box, window, DESK_THETA_SET, residual)
    steps = 50
    for step in range(steps):
        mean = float(residual(pool.states, pool.times, pool.thetas).mean())
        kept = int(np.sum(residual(pool.states, pool.times, pool.thetas) >= mean))
        pool = evolve_samples(pool, residual, rng, box, window, DESK_THETA_SET)
        if len(pool) != 64 or np.any(pool.residuals[:kept] < mean):
            return CheckResult("evolutionary sampling", False, f"step {step}: retained sample below the pool mean")
    return CheckResult("evolutionary sampling", True, f"{steps} steps, pool size restored every step")


def check_curriculum(rng: np.random.Generator, full: bool) -> CheckResult:
    epochs = range(0, 300, 10)
    got = [curriculum_time_window(n, 300, 3.0) for n in epochs]
    expected = [(k + 1) / 10 for k in range(len(got))]
    mismatches = [n for n, a, b in zip(epochs, got, expected) if a != b]
    detail = "window bounds 0.1 ... 3.0 s exact" if not mismatches else f"mismatch at epochs {mismatches}"
    return CheckResult("curriculum time window", not mismatches, detail)


def check_collision_detector(rng: np.random.Generator, full: bool) -> CheckResult:
    game = IntersectionGame()
    cases = 100 if full else 10
    sim_cfg = SimConfig(collision_substeps=100)
    for case, x0 in enumerate(sample_box(rng, cases, (15.0, 40.0), (15.0, 25.0))):
        pair = tuple(int(t) for t in rng.choice(THETA_SPACE, size=2))
        bundle = closed_loop_sim(SimCase(x0, pair, (PolicyKind.ZERO, PolicyKind.ZERO), case_id=case), game, cfg=sim_cfg)
        if detect_collision(bundle, pair, game, 100).collided != fine_scan(bundle, pair, game, 100):
            return CheckResult("collision detector vs fine scan", False, f"case {case} disagrees")
    return CheckResult("collision detector vs fine scan", True, f"{cases} ballistic trajectories agree")


def check_checkpoint_round_trip(rng: np.random.Generator, full: bool) -> CheckResult:
    game = IntersectionGame()
    ens = small_ensemble(game, int(rng.integers(0, 2**31)), ActivationKind("sine", adaptive=True))
    data = encode_checkpoint(ens, "0" * 16)
    restored = decode_checkpoint(data, game.geometry)
    same_values = np.array_equal(restored.flat_parameters(), ens.flat_parameters())
    same_bytes = encode_checkpoint(restored, "0" * 16) == data
    return CheckResult(
        "checkpoint round trip", same_values and same_bytes,
        f"{ens.flat_parameters().size} parameters, byte-identical re-encode: {same_bytes}",
    )


def check_pretraining_gate(rng: np.random.Generator, full: bool) -> CheckResult:
    """Desk-scale boundary pretraining reaches the terminal-value gate."""
    game = IntersectionGame()
    ens = small_ensemble(game, int(rng.integers(0, 2**31)))
    ens, report = pretrain(ens, TrainConfig(theta_training_set=DESK_THETA_SET), rng, ens.sign_convention)
    passed = report.mean_boundary_error < 5e-2 and report.costate_sign_agreement >= 0.95
    return CheckResult(
        "pretraining gate", passed,
        f"boundary error {report.mean_boundary_error:.2e}, sign agreement {100 * report.costate_sign_agreement:.1f}%",
    )


@dataclass
class EndToEndReport:
    residual_first: float
    residual_last: float
    untrained_pct: float
    trained_pct: float
    cases: int

    @property
    def residual_drop(self) -> float:
        return 1.0 - self.residual_last / self.residual_first if self.residual_first > 0 else 0.0


def end_to_end_run(seed: int, overrides: Optional[Dict[str, Any]] = None, cases: int = 50) -> EndToEndReport:
    """Train from the desk profile, then compare trained and untrained checkpoints at theta=(1, 1).

    The comparison runs on the first ``cases`` initial states that survive
    the inevitable-collision filter.
    """
    config = RunConfig.from_dict(deep_merge({"seed": seed}, overrides or {}), profile="desk")
    game = IntersectionGame(config.game)
    untrained = build_ensemble(config, game)
    result = train_pno(untrained, config.trainer, config.loss_weights, config.rollout, config.seed, config.jobs)
    if not result.metrics:
        raise PnoError("Training produced no metrics")

    ev = config.evaluator
    bvp_cfg = config.bvp.solver(seed)
    rollout_cfg = replace(config.rollout, dt_grid=ev.dt)
    sim_cfg = build_sim_config(config)
    candidates = sample_test_cases(seed, 2 * cases, ev.d_bounds, ev.v_bounds)
    filtered = filter_inevitable(candidates, game, bvp_cfg, rollout_cfg, sim_cfg, config.jobs)
    states = filtered.states[:cases]
    methods = [
        MethodSpec("untrained", PolicyKind.PNO_COSTATE, untrained),
        MethodSpec("trained", PolicyKind.PNO_COSTATE, result.ensemble),
    ]
    table = safety_table(
        states, methods, Variant.WITH_INEVITABLE, game, seed, [REFERENCE_THETAS],
        bvp_cfg, rollout_cfg, sim_cfg, config.jobs,
    )
    return EndToEndReport(
        residual_first=result.metrics[0]["mean_residual"],
        residual_last=result.metrics[-1]["mean_residual"],
        untrained_pct=table.cell(REFERENCE_THETAS, "untrained").pct,
        trained_pct=table.cell(REFERENCE_THETAS, "trained").pct,
        cases=len(states),
    )


def check_end_to_end(rng: np.random.Generator, full: bool) -> CheckResult:
    """Desk-scale training lowers the theta=(1, 1) collision rate and halves the mean residual."""
    report = end_to_end_run(int(rng.integers(0, 2**31)), {"trainer": {"train_iters": 20}})
    passed = report.trained_pct < report.untrained_pct and report.residual_drop >= 0.5
    return CheckResult(
        "end-to-end desk run", passed,
        f"{report.cases} filtered cases, collisions {report.untrained_pct:.1f}% -> {report.trained_pct:.1f}%, "
        f"mean residual {report.residual_first:.2e} -> {report.residual_last:.2e} "
        f"({100 * report.residual_drop:.0f}% drop)",
    )


CheckFn = Callable[[np.random.Generator, bool], CheckResult]

#: name -> (check, runs only with --full)
CHECKS: Dict[str, Tuple[CheckFn, bool]] = {
    "gradients": (check_gradients, False),
    "hamiltonian": (check_hamiltonian_argmax, False),
    "analytic": (check_analytic_oracle, False),
    "dp": (check_dp_consistency, False),
    "evolve": (check_evolve_sampling, False),
    "curriculum": (check_curriculum, False),
    "collision": (check_collision_detector, False),
    "checkpoint": (check_checkpoint_round_trip, False),
    "pretrain": (check_pretraining_gate, True),
    "end-to-end": (check_end_to_end, True),
}


def run_checks(full: bool = False, seed: int = 0, names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Run the registered checks in order; a crashing check is reported as failed."""
    selected = list(names) if names else [name for name, (_, full_only) in CHECKS.items() if full or not full_only]
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise PnoError(f"Unknown check(s): {', '.join(unknown)} (available: {', '.join(CHECKS)})")
    results = []
    order = list(CHECKS)
    for name in selected:
        check, _ = CHECKS[name]
        rng = np.random.default_rng([seed, order.index(name)])
        start = time.perf_counter()
        try:
            result = check(rng, full)
        except PnoError as exc:
            result = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        result.seconds = time.perf_counter() - start
        logger.info("%s: %s (%.1fs)", result.name, "pass" if result.passed else "FAIL", result.seconds)
        results.append(result)
    return results
