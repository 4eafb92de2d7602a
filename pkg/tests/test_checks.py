"""
Tests for the property suite runner.
"""
import numpy as np
import pytest

from pno_game.checks import CHECKS, check_gradients, end_to_end_run, run_checks
from pno_game.exceptions import PnoError

TINY_RUN = {
    "operator": {"hidden_widths": [8, 8], "basis_count": 4, "lattice_resolution": [5, 5]},
    "trainer": {
        "pretrain_iters": 2, "train_iters": 2, "gradient_steps": 1, "rollout_count": 2,
        "residual_points": 4, "boundary_points": 4,
    },
}


def test_fast_checks_pass():
    results = run_checks(names=["curriculum", "evolve", "checkpoint", "collision"])
    assert [r.passed for r in results] == [True] * 4
    assert all(r.seconds >= 0.0 for r in results)


def test_checks_are_reproducible():
    first = run_checks(seed=4, names=["checkpoint"])[0]
    second = run_checks(seed=4, names=["checkpoint"])[0]
    assert first.detail == second.detail


def test_full_only_checks():
    assert {name for name, (_, full_only) in CHECKS.items() if full_only} == {"pretrain", "end-to-end"}


def test_gradient_check_covers_every_activation():
    result = check_gradients(np.random.default_rng(0), full=False)
    assert result.passed, result.detail
    assert result.detail.startswith("100 networks")


def test_end_to_end_run_reports_both_checkpoints():
    report = end_to_end_run(seed=1, overrides=TINY_RUN, cases=2)
    assert 1 <= report.cases <= 2
    for pct in (report.untrained_pct, report.trained_pct):
        assert 0.0 <= pct <= 100.0
    assert report.residual_first > 0.0
    assert np.isfinite(report.residual_last)
    assert report.residual_drop == pytest.approx(1.0 - report.residual_last / report.residual_first)


def test_unknown_check_name():
    with pytest.raises(PnoError):
        run_checks(names=["curriculum", "bogus"])
