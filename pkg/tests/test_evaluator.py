"""
Tests for closed-loop simulation, collision detection, safety tables and exports.
"""
import numpy as np
import pytest

from pno_game.exceptions import CheckpointMismatchError, DomainError, PnoError
from pno_game.game.intersection import GameGeometry, IntersectionGame
from pno_game.evaluation.export import (
    ValueSlice,
    basis_ranking,
    bvp_value_grid,
    difference_field,
    export_value_grid,
    write_contour_svg,
)
import pno_game.evaluation.safety as safety_module
from pno_game.evaluation.safety import (
    GROUND_TRUTH,
    MethodSpec,
    SafetyCell,
    Variant,
    filter_inevitable,
    safety_table,
    sample_test_cases,
)
from pno_game.evaluation.simulate import (
    PolicyKind,
    SimCase,
    closed_loop_sim,
    detect_collision,
    fine_scan,
)


ZERO = (PolicyKind.ZERO, PolicyKind.ZERO)
ZERO_METHOD = MethodSpec("zero", PolicyKind.ZERO)


@pytest.fixture
def free_game():
    return IntersectionGame(GameGeometry(b=0.0))


def test_zero_policy_is_ballistic(game):
    x0 = (20.0, 19.0, 60.0, 16.0)
    bundle = closed_loop_sim(SimCase(x0, (1, 1), ZERO), game)
    t = bundle.times
    assert bundle.times[-1] == 3.0
    assert np.allclose(bundle.states[:, 0], 20.0 + 19.0 * t, atol=1e-8)
    assert np.allclose(bundle.states[:, 2], 60.0 + 16.0 * t, atol=1e-8)
    assert np.all(bundle.controls == 0.0)
    assert np.allclose(bundle.state_at(1.234), [20.0 + 19.0 * 1.234, 19.0, 60.0 + 16.0 * 1.234, 16.0])


def test_swapped_case_mirrors_states(game):
    case = SimCase((20.0, 19.0, 25.0, 22.0), (2, 4), ZERO)
    bundle = closed_loop_sim(case, game)
    mirrored = closed_loop_sim(case.swapped(), game)
    assert np.allclose(mirrored.states, bundle.states[:, [2, 3, 0, 1]])
    assert np.allclose(mirrored.values, bundle.values[:, ::-1])


def test_parked_in_zones_collides_at_start(game):
    lo1, hi1 = game.geometry.zone(1)
    lo5, hi5 = game.geometry.zone(5)
    x0 = ((lo1 + hi1) / 2, 0.0, (lo5 + hi5) / 2, 0.0)
    bundle = closed_loop_sim(SimCase(x0, (1, 5), ZERO), game)
    result = detect_collision(bundle, (1, 5), game)
    assert result.collided
    assert result.time == 0.0
    assert int(result) == 1


def test_collision_time_is_refined(game):
    # player 2 waits in the middle of its zone, player 1 drives in at 20 m/s
    bundle = closed_loop_sim(SimCase((20.0, 20.0, 36.5, 0.0), (1, 1), ZERO), game)
    result = detect_collision(bundle, (1, 1), game, substeps=100, tolerance=1e-3)
    entry = (game.geometry.zone(1)[0] - 20.0) / 20.0
    assert result.collided
    assert entry - 1e-6 <= result.time <= entry + 1e-3 + 1e-6


def test_detector_agrees_with_fine_scan(game):
    states = sample_test_cases(5, 6, (15.0, 40.0), (15.0, 25.0))
    for case, x0 in enumerate(states):
        thetas = (1 + case % 5, 5 - case % 5)
        bundle = closed_loop_sim(SimCase(tuple(x0), thetas, ZERO, case_id=case), game)
        assert detect_collision(bundle, thetas, game, 20).collided == fine_scan(bundle, thetas, game, 20)


def test_policy_requirements(game, value_only_ensemble):
    with pytest.raises(PnoError):
        closed_loop_sim(SimCase((20.0, 20.0, 20.0, 20.0), (1, 1), (PolicyKind.BVP_OPENLOOP,) * 2), game)
    with pytest.raises(PnoError):
        closed_loop_sim(SimCase((20.0, 20.0, 20.0, 20.0), (1, 1), (PolicyKind.PNO_COSTATE,) * 2), game)
    with pytest.raises(PnoError):
        closed_loop_sim(
            SimCase((20.0, 20.0, 20.0, 20.0), (1, 1), (PolicyKind.PNO_COSTATE,) * 2), game, value_only_ensemble
        )


def test_geometry_mismatch_is_rejected(free_game, ensemble):
    with pytest.raises(CheckpointMismatchError):
        closed_loop_sim(SimCase((20.0, 20.0, 20.0, 20.0), (1, 1), (PolicyKind.PNO_COSTATE,) * 2), free_game, ensemble)


def test_value_gradient_policy_runs(game, ensemble):
    case = SimCase((20.0, 20.0, 18.0, 21.0), (1, 1), (PolicyKind.PNO_VALUE_GRADIENT, PolicyKind.PNO_COSTATE), dt=0.5)
    bundle = closed_loop_sim(case, game, ensemble)
    lo, hi = game.control_bounds
    assert bundle.states.shape == (7, 4)
    assert np.all((bundle.controls >= lo) & (bundle.controls <= hi))


def test_pct_excludes_failures():
    cell = SafetyCell(1, 1, "pno", "with-inevitable", n_cases=4, n_collisions=1, n_failures=2)
    assert cell.pct == 50.0
    assert SafetyCell(1, 1, "pno", "census", 2, 0, 2).pct == 0.0
    assert cell.row()["pct"] == 50.0


def test_safety_table_zero_policy(game):
    states = sample_test_cases(0, 3)
    report = safety_table(states, [ZERO_METHOD], Variant.WITH_INEVITABLE, game, theta_pairs=[(1, 1), (5, 5)])
    assert report.methods == ["zero"]
    calm, aggressive = report.cell((1, 1), "zero"), report.cell((5, 5), "zero")
    for cell in (calm, aggressive):
        assert cell.n_cases == 3
        assert cell.n_collisions == sum(cell.flags)
        assert cell.pct == pytest.approx(100.0 * cell.n_collisions / 3)
    # wider zones can only add collisions along the same trajectories
    assert aggressive.n_collisions >= calm.n_collisions


def test_failed_cases_are_counted(free_game, ensemble):
    method = MethodSpec("pno", PolicyKind.PNO_COSTATE, ensemble)
    report = safety_table(sample_test_cases(0, 2), [method], Variant.WITH_INEVITABLE, free_game, theta_pairs=[(1, 1)])
    cell = report.cell((1, 1), "pno")
    assert cell.n_failures == 2
    assert cell.pct == 0.0


def test_census_uses_ground_truth_only(free_game):
    report = safety_table(sample_test_cases(1, 2), [ZERO_METHOD], Variant.CENSUS, free_game, theta_pairs=[(1, 1)])
    assert report.methods == [GROUND_TRUTH]
    assert report.cell((1, 1), GROUND_TRUTH).n_failures == 0


def test_inevitable_filter(free_game):
    # identical vehicles meet in the zone; the second pair is well separated in time
    states = np.array([[17.0, 20.0, 17.0, 20.0], [15.0, 18.0, 20.0, 25.0]])
    filtered = filter_inevitable(states, free_game)
    assert filtered.inevitable == (0,)
    assert filtered.kept == (1,)
    report = safety_table(states, [ZERO_METHOD], Variant.WITHOUT_INEVITABLE, free_game, theta_pairs=[(1, 1)])
    assert report.excluded_inevitable == 1
    assert report.cell((1, 1), "zero").n_cases == 1


def test_filtered_cases_keep_their_ids(free_game, monkeypatch):
    states = np.array([[17.0, 20.0, 17.0, 20.0], [15.0, 18.0, 20.0, 25.0]])
    solved = []
    original = safety_module._solve_reference

    def recording(x0, thetas, game, cfg, rollout_cfg, case_id):
        solved.append((case_id, tuple(x0)))
        return original(x0, thetas, game, cfg, rollout_cfg, case_id)

    monkeypatch.setattr(safety_module, "_solve_reference", recording)
    report = safety_table(
        states, [MethodSpec.ground_truth()], Variant.WITHOUT_INEVITABLE, free_game, theta_pairs=[(1, 1)]
    )
    assert report.cell((1, 1), GROUND_TRUTH).n_cases == 1
    assert [case for case, _ in solved] == [0, 1, 1]
    for case, x0 in solved:
        assert x0 == tuple(states[case])


def test_empty_method_list(game):
    with pytest.raises(PnoError):
        safety_table(sample_test_cases(0, 1), [], Variant.WITH_INEVITABLE, game, theta_pairs=[(1, 1)])


def test_value_grid_rows(ensemble):
    value_slice = ValueSlice(resolution=3)
    rows = export_value_grid(ensemble, (1, 1), value_slice, basis=(0, 2))
    assert len(rows) == 9
    assert set(rows[0]) == {"d1", "d2", "value", "basis_0", "basis_2"}
    state = np.array([rows[5]["d1"], 18.0, rows[5]["d2"], 18.0])
    assert rows[5]["value"] == pytest.approx(ensemble.value_batch(state, 0.0, (1, 1), 1)[0])


def test_value_slice_validation(ensemble):
    with pytest.raises(DomainError):
        export_value_grid(ensemble, (1, 1), ValueSlice(speed=40.0, resolution=3))
    with pytest.raises(DomainError):
        export_value_grid(ensemble, (1, 1), ValueSlice(d_bounds=(0.0, 50.0), resolution=3))


def test_basis_ranking_is_permutation(ensemble):
    ranking = basis_ranking(ensemble, [(1, 1), (5, 5)])
    assert sorted(row["k"] for row in ranking) == list(range(ensemble.basis_count))
    assert [row["rank"] for row in ranking] == list(range(1, ensemble.basis_count + 1))
    means = [row["mean_abs"] for row in ranking]
    assert means == sorted(means, reverse=True)


def test_difference_field(ensemble):
    a = export_value_grid(ensemble, (1, 1), ValueSlice(resolution=3))
    b = export_value_grid(ensemble, (5, 5), ValueSlice(resolution=3))
    assert all(row["value"] == 0.0 for row in difference_field(a, a))
    diff = difference_field(a, b)
    assert diff[4]["value"] == pytest.approx(abs(a[4]["value"] - b[4]["value"]))
    with pytest.raises(DomainError):
        difference_field(a, a[:-1])


def test_bvp_value_grid_zero_penalty(free_game):
    rows = bvp_value_grid(free_game, (1, 1), ValueSlice(resolution=2))
    assert len(rows) == 4
    assert all(np.isfinite(row["value"]) for row in rows)
    with pytest.raises(DomainError):
        bvp_value_grid(free_game, (1, 1), ValueSlice(t=3.0, resolution=2))


def test_contour_svg_is_reproducible(ensemble, tmp_path):
    rows = export_value_grid(ensemble, (1, 1), ValueSlice(resolution=5))
    first = write_contour_svg(rows, tmp_path / "a.svg", "value").read_bytes()
    second = write_contour_svg(rows, tmp_path / "b.svg", "value").read_bytes()
    assert first.lstrip().startswith(b"<?xml")
    assert first == second
