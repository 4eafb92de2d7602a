"""
Tests for the branch x trunk operator ensemble.
"""
import numpy as np
import pytest

from pno_game.exceptions import DimensionMismatchError, DomainError, PnoError
from pno_game.models.operator import LatticeSpec, Normalizer, PolicySource, encode_theta


STATE = np.array([30.0, 20.0, 40.0, 18.0])


def test_lattice_nodes_position_mode():
    lattice = LatticeSpec(resolution=(3, 4))
    nodes = lattice.nodes()
    assert nodes.shape == (12, 4)
    # first axis slowest
    assert np.allclose(nodes[:4, 0], 15.0)
    assert np.allclose(nodes[:4, 2], np.linspace(15.0, 105.0, 4))


def test_lattice_rejects_wrong_resolution_count():
    with pytest.raises(DimensionMismatchError):
        LatticeSpec(resolution=(3, 3), mode="full")
    with pytest.raises(DimensionMismatchError):
        LatticeSpec(resolution=(3,))


def test_encode_theta_distinguishes_types(game):
    lattice = LatticeSpec(resolution=(31, 31))
    calm = encode_theta(lattice, (1, 1), game)
    aggressive = encode_theta(lattice, (5, 1), game)
    assert calm.dtype == np.uint8
    assert aggressive.sum() > calm.sum() > 0


def test_normalizer_maps_box_to_unit_cube():
    norm = Normalizer.from_box((15.0, 105.0), (15.0, 32.0), 3.0)
    lower = np.array(norm.lower)
    upper = np.array(norm.upper)
    assert np.allclose(norm.normalize(lower), -1.0)
    assert np.allclose(norm.normalize(upper), 1.0)
    z = np.array([40.0, 20.0, 60.0, 25.0, 1.2])
    assert np.allclose(norm.denormalize(norm.normalize(z)), z)


def test_parameter_blocks_order(ensemble, value_only_ensemble):
    names = [name for name, _ in ensemble.parameter_blocks()]
    assert names == [
        "player1.value_branch", "player1.value_trunk", "player1.costate_branch", "player1.costate_trunk",
        "player2.value_branch", "player2.value_trunk", "player2.costate_branch", "player2.costate_trunk",
    ]
    assert len(value_only_ensemble.parameter_blocks()) == 4
    assert ensemble.has_costate and not value_only_ensemble.has_costate


def test_flat_parameters_round_trip(ensemble):
    flat = ensemble.flat_parameters()
    rebuilt = ensemble.with_flat_parameters(flat * 2.0)
    assert np.allclose(rebuilt.flat_parameters(), flat * 2.0)
    with pytest.raises(DimensionMismatchError):
        ensemble.with_flat_parameters(flat[:-1])


def test_initialize_is_deterministic(game):
    from pno_game.checks import small_ensemble

    a = small_ensemble(game, seed=8)
    b = small_ensemble(game, seed=8)
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())


def test_value_is_branch_dot_trunk(ensemble):
    coeff = ensemble.branch_coefficients((2, 3), player=1)
    basis = ensemble.value_basis_batch(STATE, 1.0, player=1)[0]
    value = ensemble.value_batch(STATE, 1.0, (2, 3), player=1)[0]
    assert value == pytest.approx(ensemble.normalizer.value_scale * coeff @ basis)


def test_player_two_uses_own_frame(ensemble):
    v2 = ensemble.value_batch(STATE, 0.5, (1, 4), player=2)[0]
    coeff = ensemble.branch_coefficients((1, 4), player=2)
    own_basis = ensemble.value_basis_batch(STATE, 0.5, player=2)
    assert own_basis.shape == (1, ensemble.basis_count)
    assert v2 == pytest.approx(ensemble.normalizer.value_scale * coeff @ own_basis[0])
    # player 2 sees the pair as (4, 1)
    assert np.array_equal(ensemble.bits((1, 4), player=2), ensemble.bits((4, 1), player=1))


def test_value_gradient_matches_finite_differences(ensemble):
    grad_x, grad_t = ensemble.value_gradient(STATE, 1.0, (1, 1), player=1)
    h = 1e-4
    for j in range(4):
        step = np.zeros(4)
        step[j] = h
        fd = (
            ensemble.value_batch(STATE + step, 1.0, (1, 1), 1)[0]
            - ensemble.value_batch(STATE - step, 1.0, (1, 1), 1)[0]
        ) / (2 * h)
        assert grad_x[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)
    fd_t = (
        ensemble.value_batch(STATE, 1.0 + h, (1, 1), 1)[0] - ensemble.value_batch(STATE, 1.0 - h, (1, 1), 1)[0]
    ) / (2 * h)
    assert grad_t == pytest.approx(fd_t, rel=1e-5, abs=1e-8)


def test_batch_with_mixed_types(ensemble):
    states = np.stack([STATE, STATE])
    pairs = np.array([[1, 1], [5, 5]])
    batch = ensemble.value_batch(states, 0.0, pairs, player=1)
    assert batch[0] == pytest.approx(ensemble.value_batch(STATE, 0.0, (1, 1), 1)[0])
    assert batch[1] == pytest.approx(ensemble.value_batch(STATE, 0.0, (5, 5), 1)[0])


def test_costate_shape_and_policy_bounds(ensemble):
    lam = ensemble.costate(STATE, 0.5, (1, 1), player=1)
    assert len(lam.as_array()) == 4
    lo, hi = ensemble.game.control_bounds
    for source in (PolicySource.VALUE_GRADIENT, PolicySource.COSTATE):
        u1, u2 = ensemble.controls(source, STATE, 0.5, (1, 1))
        assert lo <= u1 <= hi and lo <= u2 <= hi


def test_costate_requires_costate_nets(value_only_ensemble):
    with pytest.raises(PnoError):
        value_only_ensemble.costate(STATE, 0.5, (1, 1), player=1)


def test_time_outside_horizon_rejected(ensemble):
    with pytest.raises(DomainError):
        ensemble.value(STATE, 3.5, (1, 1))
    with pytest.raises(DomainError):
        ensemble.value(STATE, 1.0, (0, 1))
