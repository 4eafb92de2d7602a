"""
Tests for the intersection game: zones, penalties, Hamiltonian and frames.
"""
import numpy as np
import pytest

from pno_game.exceptions import DomainError
from pno_game.game.intersection import GameGeometry, IntersectionGame


def test_zone_bounds_default_geometry():
    g = GameGeometry()
    assert g.zone(1) == pytest.approx((34.25, 38.75))
    assert g.zone(5) == pytest.approx((31.25, 38.75))


def test_more_aggressive_type_has_wider_zone():
    g = GameGeometry()
    lows = [g.zone(theta)[0] for theta in (1, 2, 3, 4, 5)]
    assert lows == sorted(lows, reverse=True)


def test_geometry_hash_changes_with_penalty():
    assert GameGeometry().geometry_hash() != GameGeometry(b=0.0).geometry_hash()
    assert GameGeometry().geometry_hash() == GameGeometry().geometry_hash()


def test_validation_errors():
    errors = GameGeometry(u_min=3.0, u_max=1.0, T=0.0).validation_errors()
    assert any("u_min" in e for e in errors)
    assert any("T must" in e for e in errors)
    assert GameGeometry(b=0.0).validation_errors(allow_zero_penalty=False)


def test_frame_map_is_involution(game):
    state = np.array([10.0, 18.0, 20.0, 17.0])
    swapped = game.to_player_frame(state, 2)
    assert np.array_equal(swapped, [20.0, 17.0, 10.0, 18.0])
    assert np.array_equal(game.to_player_frame(swapped, 2), state)
    assert np.array_equal(game.to_player_frame(state, 1), state)


def test_penalty_is_symmetric_under_player_swap(game):
    state = np.array([36.0, 18.0, 35.0, 17.0])
    swapped = game.to_player_frame(state, 2)
    assert game.penalty(state, 1, player=2) == pytest.approx(game.penalty(swapped, 1, player=1))


def test_penalty_large_inside_small_outside(game):
    centre = np.array([37.0, 18.0, 37.0, 18.0])
    far = np.array([10.0, 18.0, 10.0, 18.0])
    assert game.penalty(centre, 1) > 0.9 * game.geometry.b
    assert game.penalty(far, 1) < 1e-6


def test_penalty_gradient_matches_finite_differences(game):
    state = np.array([34.0, 18.0, 35.5, 17.0])
    d_own, d_other = game.penalty_gradient(state, 3, player=1)
    h = 1e-6
    for index, analytic in ((0, d_own), (2, d_other)):
        step = np.zeros(4)
        step[index] = h
        fd = (game.penalty(state + step, 3) - game.penalty(state - step, 3)) / (2 * h)
        assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-3)


def test_hamiltonian_argmax_against_grid(game):
    rng = np.random.default_rng(4)
    lo, hi = game.control_bounds
    grid = np.linspace(lo, hi, int((hi - lo) / 1e-3) + 1)
    for _ in range(10):
        lam = rng.normal(scale=15.0, size=4)
        state = np.array([rng.uniform(15, 60), rng.uniform(15, 32), rng.uniform(15, 60), rng.uniform(15, 32)])
        u_star, h_star = game.maximize_hamiltonian(lam, state, 2, player=1, u_other=1.0)
        assert lo <= u_star <= hi
        c = game.penalty(state, 2, 1)
        h_grid = game.hamiltonian(lam, state, grid, 1.0, c)
        assert h_star >= np.max(h_grid) - 1e-9


def test_optimal_control_clips():
    game = IntersectionGame()
    assert game.optimal_control(100.0) == 10.0
    assert game.optimal_control(-100.0) == -5.0
    assert game.optimal_control(4.0) == 2.0


def test_terminal_costate_is_negative_gradient(game):
    state = np.array([50.0, 20.0, 45.0, 16.0])
    lam1 = game.terminal_costate(state, 1)
    lam2 = game.terminal_costate(state, 2)
    assert lam1 == pytest.approx([game.geometry.mu, -4.0, 0.0, 0.0])
    assert lam2 == pytest.approx([game.geometry.mu, 4.0, 0.0, 0.0])


def test_collision_indicator_at_zone_centres(game):
    lo1, hi1 = game.geometry.zone(1)
    lo5, hi5 = game.geometry.zone(5)
    inside = np.array([(lo1 + hi1) / 2, 0.0, (lo5 + hi5) / 2, 0.0])
    assert bool(game.collision_indicator(inside, (1, 5)))
    # boundary is closed
    edge = np.array([lo1, 0.0, hi5, 0.0])
    assert bool(game.collision_indicator(edge, (1, 5)))
    outside = np.array([lo1 - 0.01, 0.0, (lo5 + hi5) / 2, 0.0])
    assert not bool(game.collision_indicator(outside, (1, 5)))


def test_aggressive_type_collides_earlier(game):
    state = np.array([32.0, 0.0, 37.0, 0.0])
    assert not bool(game.collision_indicator(state, (1, 1)))
    assert bool(game.collision_indicator(state, (5, 1)))


def test_invalid_types_and_times(game):
    with pytest.raises(DomainError):
        game.validate_thetas((0, 1))
    with pytest.raises(DomainError):
        game.check_time(4.0)
    assert game.validate_thetas([2, 3]) == (2, 3)


def test_dynamics_batch_shape(game):
    states = np.zeros((3, 4))
    states[:, 1] = 18.0
    deriv = game.dynamics(states, 1.0, np.array([0.0, 1.0, 2.0]))
    assert deriv.shape == (3, 4)
    assert np.allclose(deriv[:, 0], 18.0)
    assert np.allclose(deriv[:, 3], [0.0, 1.0, 2.0])
