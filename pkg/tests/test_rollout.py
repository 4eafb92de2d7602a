"""
Tests for the RK45 wrapper and the characteristic rollouts.
"""
import numpy as np
import pytest

from pno_game.exceptions import DomainError, IntegrationError
from pno_game.game.intersection import GameGeometry, IntersectionGame
from pno_game.solvers.integrator import rk45_integrate
from pno_game.solvers.rollout import (
    TRAJECTORY_COLUMNS,
    RolloutConfig,
    backward_value,
    bundle_rows,
    forward_rollout,
    integrate_costate,
    rollout_batch,
)


X0 = np.array([20.0, 19.0, 18.0, 21.0])


def test_rk45_matches_exponential():
    grid = np.linspace(0.0, 2.0, 11)
    sol = rk45_integrate(lambda t, y: -y, [1.0, 2.0], (0.0, 2.0), grid, 1e-10, 1e-12)
    assert np.allclose(sol.values[:, 0], np.exp(-grid), atol=1e-8)
    assert np.allclose(sol(1.0), [np.exp(-1.0), 2 * np.exp(-1.0)], atol=1e-8)


def test_rk45_backwards_span():
    grid = np.linspace(2.0, 0.0, 5)
    sol = rk45_integrate(lambda t, y: np.array([1.0]), [5.0], (2.0, 0.0), grid)
    assert np.allclose(sol.values[:, 0], 5.0 - (2.0 - grid))


def test_rk45_rejects_non_finite_start():
    with pytest.raises(IntegrationError):
        rk45_integrate(lambda t, y: y, [np.nan], (0.0, 1.0))


def test_time_grid_ends_exactly_at_horizon():
    grid = RolloutConfig(dt_grid=0.1).time_grid(0.0, 3.0)
    assert grid.size == 31
    assert grid[-1] == 3.0
    with pytest.raises(DomainError):
        RolloutConfig(dt_grid=0.7).time_grid(0.0, 3.0)


def test_in_bounds_mask():
    cfg = RolloutConfig()
    states = np.array([[20.0, 20.0, 20.0, 20.0], [120.0, 20.0, 20.0, 20.0], [20.0, 10.0, 20.0, 20.0]])
    assert cfg.in_bounds(states).tolist() == [True, False, False]


def test_ballistic_values_equal_terminal_loss():
    game = IntersectionGame(GameGeometry(b=0.0))
    times = np.linspace(0.0, 3.0, 31)
    states = np.stack([20.0 + 19.0 * times, np.full_like(times, 19.0), 25.0 + 16.0 * times, np.full_like(times, 16.0)], axis=1)
    values = backward_value(game, times, states, np.zeros((31, 2)), (1, 1))
    mu = game.geometry.mu
    expected = [-(-mu * states[-1, 0] + 1.0), -(-mu * states[-1, 2] + 4.0)]
    assert np.allclose(values, expected, atol=1e-12)


def test_forward_rollout_bundle(ensemble):
    bundle = forward_rollout(ensemble, X0, 0.0, (2, 3), RolloutConfig(dt_grid=0.25))
    assert bundle.times.shape == (13,)
    assert bundle.states.shape == (13, 4)
    assert bundle.forward_costates.shape == (13, 2, 4)
    assert bundle.backward_costates.shape == (13, 2, 4)
    assert np.array_equal(bundle.states[0], X0)
    lo, hi = ensemble.game.control_bounds
    assert np.all((bundle.controls >= lo) & (bundle.controls <= hi))
    # the terminal value is -g exactly
    for player in (1, 2):
        own = ensemble.game.to_player_frame(bundle.terminal_state, player)
        g, _ = ensemble.game.terminal_loss_and_gradient(own[:2])
        assert bundle.values[-1, player - 1] == -g


def test_rollout_rejects_start_at_horizon(ensemble):
    with pytest.raises(DomainError):
        forward_rollout(ensemble, X0, 3.0, (1, 1))


def test_dynamic_programming_consistency(ensemble):
    cfg = RolloutConfig(rk_rel_tol=1e-10, rk_abs_tol=1e-12, dt_grid=0.25)
    pair = (1, 5)
    bundle = forward_rollout(ensemble, X0, 0.0, pair, cfg)
    quadrature = backward_value(
        ensemble.game, bundle.times, bundle.states, bundle.controls, pair,
        refinement=50, state_path=bundle.state_path, control_path=bundle.control_path,
    )
    scale = max(1.0, float(np.max(np.abs(bundle.values))))
    assert np.max(np.abs(quadrature - bundle.values)) / scale <= 1e-4

    lam = bundle.backward_costates
    replay = integrate_costate(
        ensemble.game, bundle.state_path, lam[0], (bundle.times[0], bundle.times[-1]), bundle.times, pair, 1e-10, 1e-12
    )
    assert np.max(np.abs(replay[-1] - lam[-1])) / max(1.0, float(np.max(np.abs(lam[-1])))) <= 1e-6


def test_terminal_from_g_sets_terminal_costate(ensemble):
    cfg = RolloutConfig(dt_grid=0.5, terminal_from_g=True)
    bundle = forward_rollout(ensemble, X0, 1.0, (1, 1), cfg)
    for player in (1, 2):
        expected = ensemble.game.terminal_costate(bundle.terminal_state, player)
        assert np.allclose(bundle.backward_costates[-1, player - 1], expected)


def test_rollout_batch_keeps_order(ensemble):
    states = np.stack([X0, X0 + 1.0])
    bundles, failed = rollout_batch(ensemble, states, np.array([0.0, 1.0]), [(1, 1), (2, 2)], RolloutConfig(dt_grid=0.5))
    assert failed == []
    assert [b.case_id for b in bundles] == [0, 1]
    assert bundles[1].times[0] == 1.0


def test_bundle_rows_use_global_order(ensemble):
    bundle = forward_rollout(ensemble, X0, 2.0, (1, 2), RolloutConfig(dt_grid=0.5))
    rows = bundle_rows(bundle, ensemble.game)
    assert len(rows) == 3
    assert set(rows[0]) == set(TRAJECTORY_COLUMNS)
    lam2_own = bundle.backward_costates[0, 1]
    assert rows[0]["lam2_d2"] == lam2_own[0]
    assert rows[0]["lam2_d1"] == lam2_own[2]


def test_accumulated_cost_values_match_quadrature(ensemble):
    cfg = RolloutConfig(dt_grid=0.25, rk_rel_tol=1e-10, rk_abs_tol=1e-12)
    bundle = forward_rollout(ensemble, X0, 0.0, (1, 2), cfg)
    quadrature = backward_value(
        ensemble.game, bundle.times, bundle.states, bundle.controls, (1, 2), refinement=50,
        state_path=bundle.state_path, control_path=bundle.control_path,
    )
    scale = max(1.0, float(np.max(np.abs(bundle.values))))
    assert np.max(np.abs(quadrature - bundle.values)) / scale <= 1e-4
