"""
Tests for sampling, loss terms, the curriculum and the training loops.
"""
import numpy as np
import pytest
import torch

import pno_game.solvers.rollout as rollout_module
from pno_game.checks import small_ensemble
from pno_game.exceptions import IntegrationError, NonFiniteLossError, PretrainDivergenceError, TrainingAbortedError
from pno_game.game.intersection import GameGeometry, IntersectionGame
from pno_game.models.checkpoint import encode_checkpoint
from pno_game.solvers.bvp import SupervisedDataset, generate_dataset
from pno_game.solvers.rollout import RolloutConfig, forward_rollout
from pno_game.training.hybrid import HybridConfig, mean_value_error, train_hybrid
from pno_game.training.losses import (
    TERM_NAMES,
    BoundaryBatch,
    BundleTargets,
    LossWeights,
    ResidualBatch,
    boundary_residuals,
    hji_residuals,
    loss_and_gradient,
    pde_residual,
)
from pno_game.training.sampling import SamplingBox, evolve_samples, sample_times, uniform_pool
from pno_game.training.trainer import (
    DESK_THETA_SET,
    METRIC_COLUMNS,
    TrainConfig,
    boundary_errors,
    curriculum_time_window,
    learning_rate_at,
    pretrain,
    sample_boundary,
    time_window,
    train_pno,
)
from pno_game.utils.seeding import seed_everything


STATES = np.array([[30.0, 20.0, 40.0, 18.0], [36.0, 17.0, 37.0, 25.0]])


def tiny_config(**overrides):
    values = dict(
        pretrain_iters=2, train_iters=2, gradient_steps=1, rollout_count=2,
        residual_points=4, boundary_points=4, theta_training_set=DESK_THETA_SET,
    )
    values.update(overrides)
    return TrainConfig(**values)


def test_curriculum_window_steps_every_ten_epochs():
    windows = [curriculum_time_window(n, 300, 3.0) for n in range(0, 300, 10)]
    assert windows == [(k + 1) / 10 for k in range(30)]
    assert curriculum_time_window(9, 300, 3.0) == 0.1
    assert curriculum_time_window(10, 300, 3.0) == 0.2
    assert curriculum_time_window(500, 300, 3.0) == 3.0


def test_time_window_directions():
    assert time_window(0, 30, 3.0) == (0.0, 1.0)
    lo, hi = time_window(0, 30, 3.0, direction="backward")
    assert hi == 3.0 and lo == pytest.approx(2.0)


def test_cosine_learning_rate():
    assert learning_rate_at(0, 100, 1e-3, 1e-6) == pytest.approx(1e-3)
    assert learning_rate_at(99, 100, 1e-3, 1e-6) == pytest.approx(1e-6)
    assert learning_rate_at(50, 100, 1e-3, 1e-6, "constant") == 1e-3
    rates = [learning_rate_at(k, 100, 1e-3, 1e-6) for k in range(100)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_sample_times_snap_to_grid():
    rng = np.random.default_rng(0)
    times = sample_times(rng, 200, (0.0, 3.0), grid_step=0.1)
    assert np.allclose(times, np.round(times * 10) / 10)
    assert times.max() <= 2.9 + 1e-12
    assert times.min() >= 0.0


def test_evolve_keeps_high_residual_samples():
    def residual(states, times, thetas):
        return np.abs(np.sin(states.sum(axis=1) / 7.0)) + times

    rng = np.random.default_rng(1)
    box = SamplingBox()
    pool = uniform_pool(rng, 32, box, (0.0, 3.0), DESK_THETA_SET, residual)
    for _ in range(5):
        mean = residual(pool.states, pool.times, pool.thetas).mean()
        kept = int(np.sum(residual(pool.states, pool.times, pool.thetas) >= mean))
        pool = evolve_samples(pool, residual, rng, box, (0.0, 3.0), DESK_THETA_SET)
        assert len(pool) == 32
        assert np.all(pool.residuals[:kept] >= mean)


def test_equal_residuals_survive_whole():
    rng = np.random.default_rng(2)
    flat = lambda states, times, thetas: np.ones(len(times))  # noqa: E731
    pool = uniform_pool(rng, 8, SamplingBox(), (0.0, 1.0), DESK_THETA_SET, flat)
    evolved = evolve_samples(pool, flat, rng, SamplingBox(), (0.0, 1.0), DESK_THETA_SET)
    assert np.array_equal(evolved.states, pool.states)


def test_zero_network_residuals(ensemble):
    zero = ensemble.with_flat_parameters(np.zeros_like(ensemble.flat_parameters()))
    thetas = np.array([[1, 1], [5, 1]])
    res = hji_residuals(zero.view(), zero.game, STATES, np.array([0.5, 1.0]), thetas).detach().numpy()
    game = zero.game
    # value == 0 means controls are zero and only the penalty remains
    expected = np.stack([
        -game.penalty(STATES, thetas[:, 0], 1),
        -game.penalty(STATES, thetas[:, 1], 2),
    ], axis=-1)
    assert np.allclose(res, expected)

    batch = BoundaryBatch(STATES, thetas)
    bc = boundary_residuals(zero.view(), game, batch).detach().numpy()
    assert np.allclose(bc[:, 0], (STATES[:, 1] - 18.0) ** 2 - game.geometry.mu * STATES[:, 0])
    assert pde_residual(zero, STATES[0], 0.5, (1, 1), 2) == pytest.approx(expected[0, 1])


def test_non_finite_loss_names_term(ensemble):
    broken = ensemble.with_flat_parameters(np.full_like(ensemble.flat_parameters(), np.nan))
    batch = ResidualBatch(STATES, np.array([0.5, 1.0]), np.array([[1, 1], [1, 1]]))
    with pytest.raises(NonFiniteLossError) as info:
        loss_and_gradient(broken, batch, BoundaryBatch.empty(), None)
    assert info.value.term == "pde"


def test_loss_gradient_covers_all_terms(ensemble):
    bundle = forward_rollout(ensemble, [20.0, 20.0, 20.0, 20.0], 2.0, (1, 1), RolloutConfig(dt_grid=0.5))
    targets = BundleTargets.from_bundles([bundle])
    residual = ResidualBatch(STATES, np.array([0.5, 1.0]), np.array([[1, 1], [5, 5]]))
    report, grad = loss_and_gradient(ensemble, residual, BoundaryBatch(STATES, np.array([[1, 1], [5, 5]])), targets)
    assert set(report.terms) == set(TERM_NAMES)
    assert all(report.terms[name] > 0 for name in TERM_NAMES)
    assert report.total == pytest.approx(sum(report.terms.values()))
    assert grad.shape == ensemble.flat_parameters().shape
    assert np.all(np.isfinite(grad)) and np.any(grad != 0)


def test_zero_weights_drop_rollout_terms(ensemble):
    bundle = forward_rollout(ensemble, [20.0, 20.0, 20.0, 20.0], 2.0, (1, 1), RolloutConfig(dt_grid=0.5))
    weights = LossWeights(C1=1.0, C2=0.0, C3=0.0, C4=0.0, C5=0.0)
    report, _ = loss_and_gradient(
        ensemble, ResidualBatch.empty(), BoundaryBatch.empty(), BundleTargets.from_bundles([bundle]), weights
    )
    assert report.total == 0.0


def test_bundle_targets_skip_out_of_bounds(ensemble):
    bundle = forward_rollout(ensemble, [20.0, 20.0, 20.0, 20.0], 2.0, (1, 1), RolloutConfig(dt_grid=0.5, d_bounds=(15.0, 25.0)))
    targets = BundleTargets.from_bundles([bundle])
    assert len(targets) == int(bundle.in_bounds.sum())
    assert len(BundleTargets.from_bundles([])) == 0


def test_pretrain_is_deterministic(ensemble):
    cfg = tiny_config(pretrain_iters=3)
    a, report_a = pretrain(ensemble, cfg, np.random.default_rng(0))
    b, report_b = pretrain(ensemble, cfg, np.random.default_rng(0))
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())
    assert report_a.history == report_b.history
    assert 0.0 <= report_a.costate_sign_agreement <= 1.0


def test_pretrain_reduces_boundary_loss(ensemble):
    cfg = tiny_config(pretrain_iters=150, boundary_points=64, learning_rate=1e-2, min_learning_rate=1e-3)
    rng = np.random.default_rng(3)
    holdout = sample_boundary(np.random.default_rng(99), cfg, 200)
    before, _ = boundary_errors(ensemble, holdout)
    trained, report = pretrain(ensemble, cfg, rng)
    after, _ = boundary_errors(trained, holdout)
    assert after < before
    assert report.iterations == 150


def test_pretrain_divergence_guard(ensemble):
    cfg = tiny_config(pretrain_iters=5, divergence_factor=1e-6, divergence_window=1)
    with pytest.raises(PretrainDivergenceError) as info:
        pretrain(ensemble, cfg, np.random.default_rng(0))
    assert len(info.value.history) == 2


def test_train_pno_metrics(ensemble):
    seen = []
    result = train_pno(ensemble, tiny_config(), rollout_cfg=RolloutConfig(dt_grid=0.5), seed=4, on_iteration=seen.append)
    assert len(result.metrics) == 2 == len(seen)
    assert set(METRIC_COLUMNS) <= set(result.metrics[0])
    assert result.metrics[0]["window_T"] == 3.0
    assert result.failed_rollouts == 0
    assert not np.array_equal(result.ensemble.flat_parameters(), ensemble.flat_parameters())


@pytest.fixture
def deterministic_torch():
    enabled, threads = torch.are_deterministic_algorithms_enabled(), torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(enabled)
    torch.set_num_threads(threads)


def test_seeded_runs_give_identical_checkpoints(ensemble, deterministic_torch):
    checkpoints = []
    for _ in range(2):
        seed_everything(7, deterministic=True)
        result = train_pno(ensemble, tiny_config(), rollout_cfg=RolloutConfig(dt_grid=0.5), seed=7)
        checkpoints.append(encode_checkpoint(result.ensemble, "0" * 16))
    assert checkpoints[0] == checkpoints[1]


def test_train_pno_lowers_total_loss():
    # b = 0: no zone penalty in the PDE term
    ensemble = small_ensemble(IntersectionGame(GameGeometry(b=0.0)), seed=3)
    cfg = tiny_config(
        pretrain_iters=0, train_iters=3, gradient_steps=30, residual_points=64, boundary_points=64,
        learning_rate=1e-2, min_learning_rate=1e-3,
    )
    result = train_pno(ensemble, cfg, rollout_cfg=RolloutConfig(dt_grid=0.5), seed=5)
    assert result.metrics[-1]["loss_total"] < result.metrics[0]["loss_total"]


def test_train_pno_aborts_when_rollouts_fail(ensemble, monkeypatch):
    def failing_rollout(*args, **kwargs):
        raise IntegrationError("step size underflow", failure_time=0.5)

    monkeypatch.setattr(rollout_module, "forward_rollout", failing_rollout)
    with pytest.raises(TrainingAbortedError) as info:
        train_pno(ensemble, tiny_config(), rollout_cfg=RolloutConfig(dt_grid=0.5), seed=4)
    assert "2 of 2 rollouts failed at iteration 0" in str(info.value)


@pytest.fixture
def small_dataset():
    game = IntersectionGame(GameGeometry(b=0.0))
    dataset, _, _ = generate_dataset(game, 1, [(1, 1)], seed=0, rollout_cfg=RolloutConfig(dt_grid=0.5))
    return dataset


def test_train_hybrid_two_stages(value_only_ensemble, small_dataset):
    hybrid = HybridConfig(stage1_iters=3, stage2_iters=2, batch_size=8)
    result = train_hybrid(value_only_ensemble, small_dataset, tiny_config(), hybrid, seed=2)
    assert len(result.metrics) == 5
    assert all("loss_supervised" in row for row in result.metrics)
    # stage 1 rows carry no physics terms
    assert result.metrics[0]["loss_pde"] == 0.0
    assert result.metrics[-1]["loss_pde"] > 0.0
    assert np.isfinite(mean_value_error(result.ensemble, small_dataset))


def test_train_hybrid_rejects_empty_dataset(value_only_ensemble):
    empty = SupervisedDataset.from_bundles([])
    with pytest.raises(ValueError):
        train_hybrid(value_only_ensemble, empty, tiny_config())
