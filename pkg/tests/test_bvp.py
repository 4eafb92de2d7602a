"""
Tests for the shooting BVP solver and the supervised dataset.
"""
import numpy as np
import pytest

from pno_game.exceptions import BvpConvergenceError
from pno_game.game.intersection import GameGeometry, IntersectionGame
from pno_game.solvers.bvp import (
    BvpConfig,
    ContinuationSchedule,
    ShootingProblem,
    SupervisedDataset,
    analytic_costates,
    analytic_unconstrained,
    generate_dataset,
    solve_bvp,
)
from pno_game.solvers.rollout import RolloutConfig, bundle_rows


X0 = np.array([16.0, 20.0, 18.0, 22.0])


@pytest.fixture
def free_game():
    return IntersectionGame(GameGeometry(b=0.0))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ContinuationSchedule((1.0, 2.0))
    with pytest.raises(ValueError):
        ContinuationSchedule((0.0, 2.0, 2.0))
    schedule = ContinuationSchedule.geometric(1e4, 8)
    assert len(schedule.levels) == 8
    assert schedule.levels[0] == 0.0
    assert schedule.final == pytest.approx(1e4)
    assert ContinuationSchedule.geometric(0.0).levels == (0.0,)


def test_analytic_costates_at_target_speed():
    geometry = GameGeometry(b=0.0)
    lam = analytic_costates([20.0, 18.0, 20.0, 18.0], 0.0, geometry)
    assert lam[:, 0] == pytest.approx([geometry.mu, geometry.mu])
    # already at v_bar: only the tiny progress reward pushes the control
    assert np.all(np.abs(lam[:, 1]) < 1e-4)


def test_analytic_solution_satisfies_boundary_conditions(free_game):
    solution = analytic_unconstrained(X0, 0.0, free_game)
    assert solution.converged
    assert solution.residual_norm < 1e-10
    bundle = solution.bundle
    # speeds move toward v_bar
    assert abs(bundle.states[-1, 1] - 18.0) < abs(X0[1] - 18.0)
    assert np.allclose(bundle.state_at(bundle.times), bundle.states)


def test_analytic_start_has_zero_shooting_residual(free_game):
    problem = ShootingProblem(free_game, X0, 0.0, (1, 1), BvpConfig())
    z = analytic_costates(X0, 0.0, free_game.geometry).reshape(8)
    assert np.linalg.norm(problem.residual(z)) < 1e-7


def test_shooting_matches_analytic_for_zero_penalty(free_game):
    exact = analytic_unconstrained(X0, 0.0, free_game)
    shot = solve_bvp(X0, 0.0, (2, 3), ContinuationSchedule((0.0,)), free_game)
    assert shot.converged
    assert np.allclose(shot.bundle.states, exact.bundle.states, atol=1e-6)
    assert np.allclose(shot.bundle.backward_costates, exact.bundle.backward_costates, atol=1e-6)
    assert np.allclose(shot.bundle.values, exact.bundle.values, atol=1e-6)


def test_continuation_to_mild_penalty():
    game = IntersectionGame(GameGeometry(b=1.0))
    solution = solve_bvp(X0, 0.0, (1, 1), ContinuationSchedule((0.0, 1.0)), game)
    assert solution.converged
    assert [entry.b for entry in solution.trace] == [0.0, 1.0]
    terminal = np.stack([game.terminal_costate(solution.bundle.terminal_state, p) for p in (1, 2)])
    assert np.allclose(solution.bundle.backward_costates[-1], terminal, atol=1e-5)


def test_failed_level_is_reported():
    game = IntersectionGame()
    cfg = BvpConfig(max_newton_iters=0, restarts=0)
    solution = solve_bvp(X0, 0.0, (1, 1), ContinuationSchedule((0.0, 1e4)), game, cfg)
    assert not solution.converged
    with pytest.raises(BvpConvergenceError):
        solution.require()


def test_generate_dataset_records(free_game):
    dataset, report, solutions = generate_dataset(free_game, 2, [(1, 1), (4, 2)], seed=1)
    steps = RolloutConfig().time_grid(0.0, free_game.horizon).size
    assert report.requested == report.converged == 2
    assert report.convergence_rate == 1.0
    assert len(dataset) == 2 * 2 * steps
    assert set(map(tuple, dataset.thetas)) == {(1, 1), (4, 2)}
    assert len(dataset.for_player(2)) == 2 * steps
    manifest = report.manifest([{"case_id": 0}])
    assert manifest["geometry_hash"] == free_game.geometry.geometry_hash()
    assert manifest["cases"] == [{"case_id": 0}]


def test_dataset_from_trajectory_rows(free_game):
    dataset, _, solutions = generate_dataset(free_game, 1, [(2, 5)], seed=3)
    rows = [
        {key: str(value) for key, value in row.items()}
        for row in bundle_rows(solutions[0].bundle, free_game)
    ]
    rebuilt = SupervisedDataset.from_rows(rows, free_game)
    order = np.lexsort((rebuilt.players, rebuilt.times))
    expected = np.lexsort((dataset.players, dataset.times))
    assert np.allclose(rebuilt.values[order], dataset.values[expected])
    assert np.allclose(rebuilt.costates[order], dataset.costates[expected])


def test_generate_dataset_rejects_empty(free_game):
    with pytest.raises(ValueError):
        generate_dataset(free_game, 0, [(1, 1)], seed=0)
