"""
Boundary pretraining and the PNO training loop.

One iteration: draw residual and boundary batches in the current time
window; every ``resample_period`` iterations evolve the rollout pool and roll
out fresh trajectory bundles; then take ``gradient_steps`` Adam updates
against the frozen bundles.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from ..exceptions import PretrainDivergenceError, TrainingAbortedError
from ..models.autodiff_net import OptimizerState, optimizer_step
from ..models.operator import OperatorEnsemble
from ..solvers.rollout import RolloutConfig, rollout_batch
from .losses import (
    TERM_NAMES,
    BoundaryBatch,
    BundleTargets,
    LossReport,
    LossWeights,
    ResidualBatch,
    boundary_residuals,
    flat_gradient,
    loss_and_gradient,
    reduce_loss,
    terminal_costate_residuals,
)
from .sampling import SamplingBox, ensemble_residual_fn, evolve_samples, sample_thetas, sample_times, uniform_pool

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "iter", "loss_total", "loss_pde", "loss_bc", "loss_C2", "loss_C3", "loss_C4", "loss_C5",
    "mean_residual", "window_T",
)

DESK_THETA_SET: Tuple[Tuple[int, int], ...] = ((1, 1), (5, 5))
FULL_THETA_SET: Tuple[Tuple[int, int], ...] = ((1, 1), (1, 5), (5, 1), (5, 5))


@dataclass(frozen=True)
class TrainConfig:
    pretrain_iters: int = 2000
    train_iters: int = 30
    gradient_steps: int = 100
    rollout_count: int = 64
    residual_points: int = 256
    boundary_points: int = 256
    learning_rate: float = 1e-3
    min_learning_rate: float = 1e-6
    lr_schedule: str = "cosine"
    resample_period: int = 10
    theta_training_set: Tuple[Tuple[int, int], ...] = FULL_THETA_SET
    d_bounds: Tuple[float, float] = (15.0, 105.0)
    v_bounds: Tuple[float, float] = (15.0, 32.0)
    loss_reduction: str = "sum"
    divergence_factor: float = 10.0
    divergence_window: int = 100
    max_failure_fraction: float = 0.5

    def validation_errors(self) -> List[str]:
        errors = []
        for name in ("train_iters", "gradient_steps", "rollout_count", "residual_points",
                     "boundary_points", "resample_period"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if self.pretrain_iters < 0:
            errors.append("pretrain_iters must be nonnegative")
        if self.learning_rate < 0 or self.min_learning_rate < 0:
            errors.append("learning rates must be nonnegative")
        if self.lr_schedule not in ("cosine", "constant"):
            errors.append(f"lr_schedule must be 'cosine' or 'constant', got '{self.lr_schedule}'")
        if self.loss_reduction not in ("sum", "mean"):
            errors.append(f"loss_reduction must be 'sum' or 'mean', got '{self.loss_reduction}'")
        if not self.theta_training_set:
            errors.append("theta_training_set must not be empty")
        return errors

    @property
    def box(self) -> SamplingBox:
        return SamplingBox(tuple(self.d_bounds), tuple(self.v_bounds))


def learning_rate_at(step: int, total_steps: int, initial: float, final: float, schedule: str = "cosine") -> float:
    """Cosine decay from ``initial`` to ``final`` over ``total_steps``, or constant."""
    if schedule == "constant" or total_steps <= 1:
        return initial
    progress = min(step / (total_steps - 1), 1.0)
    return final + 0.5 * (initial - final) * (1.0 + math.cos(math.pi * progress))


def curriculum_time_window(num_epoch: int, train_iters: int, horizon: float = 3.0, period: int = 10) -> float:
    """Upper end of the forward time window: T (n0 + period) / train_iters, capped at T,
    where n0 is ``num_epoch`` rounded down to a multiple of ``period``."""
    n0 = num_epoch - num_epoch % period
    return min(horizon, horizon * (n0 + period) / train_iters)


def time_window(
    num_epoch: int, train_iters: int, horizon: float, direction: str = "forward", period: int = 10
) -> Tuple[float, float]:
    """Sampling interval: [0, w] growing forward or [T - w, T] growing back from T."""
    width = curriculum_time_window(num_epoch, train_iters, horizon, period)
    if direction == "backward":
        return max(0.0, horizon - width), horizon
    return 0.0, width


@dataclass
class PretrainReport:
    iterations: int
    final_loss: float
    mean_boundary_error: float
    costate_sign_agreement: float
    history: List[float] = field(default_factory=list)


@dataclass
class TrainResult:
    ensemble: OperatorEnsemble
    metrics: List[Dict[str, float]] = field(default_factory=list)
    pretrain: Optional[PretrainReport] = None
    failed_rollouts: int = 0


def sample_boundary(rng: np.random.Generator, cfg: TrainConfig, count: int) -> BoundaryBatch:
    return BoundaryBatch(cfg.box.sample_states(rng, count), sample_thetas(rng, count, cfg.theta_training_set))


def boundary_errors(ens: OperatorEnsemble, batch: BoundaryBatch, sign_convention: str = "maximizing") -> Tuple[float, float]:
    """(mean |boundary residual| / value_scale, fraction of terminal lambda_v signs matching -2(v - v_bar)).

    The sign fraction is taken over states with |v - v_bar| > 1e-6 and is 1.0
    for ensembles without costate nets.
    """
    view = ens.view()
    res = boundary_residuals(view, ens.game, batch, sign_convention).detach().numpy()
    mean_error = float(np.abs(res).mean() / ens.normalizer.value_scale)
    if not ens.has_costate:
        return mean_error, 1.0
    lam = terminal_costate_residuals(view, ens.game, batch.states, batch.thetas).detach().numpy()
    agree, counted = 0, 0
    for player in (1, 2):
        target = ens.game.terminal_costate(batch.states, player)[:, 1]
        predicted = lam[:, player - 1, 1] + target
        valid = np.abs(target) > 1e-6
        agree += int(np.sum(np.sign(predicted[valid]) == np.sign(target[valid])))
        counted += int(valid.sum())
    return mean_error, (agree / counted if counted else 1.0)


def pretrain(
    ens: OperatorEnsemble,
    cfg: TrainConfig,
    rng: np.random.Generator,
    sign_convention: str = "maximizing",
    holdout: int = 1000,
) -> Tuple[OperatorEnsemble, PretrainReport]:
    """Fit value and costate nets to the terminal conditions on resampled states.

    Raises:
        PretrainDivergenceError: the loss grew by ``divergence_factor`` over
            ``divergence_window`` iterations.
    """
    flat = ens.flat_parameters()
    mask = ens.slope_mask()
    opt = OptimizerState.zeros(flat.size, cfg.learning_rate)
    history: List[float] = []
    for it in range(cfg.pretrain_iters):
        batch = sample_boundary(rng, cfg, cfg.boundary_points)
        flat_t = torch.tensor(flat, dtype=torch.float64, requires_grad=True)
        view = ens.view(flat_t)
        total = reduce_loss(boundary_residuals(view, ens.game, batch, sign_convention).abs(), cfg.loss_reduction)
        if ens.has_costate:
            costate = terminal_costate_residuals(view, ens.game, batch.states, batch.thetas)
            total = total + reduce_loss(costate.abs(), cfg.loss_reduction)
        history.append(float(total.detach()))
        if not np.isfinite(history[-1]):
            raise PretrainDivergenceError(f"Pretraining loss became non-finite at iteration {it}", history)
        if it >= cfg.divergence_window and history[-1] > cfg.divergence_factor * history[-1 - cfg.divergence_window]:
            raise PretrainDivergenceError(
                f"Pretraining diverged at iteration {it}: loss {history[-1]:.3e} vs "
                f"{history[-1 - cfg.divergence_window]:.3e} {cfg.divergence_window} iterations earlier",
                history,
            )
        lr = learning_rate_at(it, cfg.pretrain_iters, cfg.learning_rate, cfg.min_learning_rate, cfg.lr_schedule)
        flat, opt = optimizer_step(flat, flat_gradient(total, flat_t), opt.with_learning_rate(lr), mask)
        ens = ens.with_flat_parameters(flat)
        if it % 500 == 0:
            logger.info("pretrain %d/%d loss %.4e", it, cfg.pretrain_iters, history[-1])

    mean_error, agreement = boundary_errors(ens, sample_boundary(rng, cfg, holdout), sign_convention)
    report = PretrainReport(cfg.pretrain_iters, history[-1] if history else float("nan"), mean_error, agreement, history)
    logger.info(
        "Pretraining done: mean boundary error %.3e (normalized), costate sign agreement %.1f%%",
        mean_error, 100.0 * agreement,
    )
    return ens, report


def metrics_row(iteration: int, report: LossReport, window_upper: float) -> Dict[str, float]:
    row: Dict[str, float] = {"iter": iteration, "loss_total": report.total}
    row.update({f"loss_{name}": report.terms.get(name, 0.0) for name in TERM_NAMES})
    row["mean_residual"] = report.mean_residual
    row["window_T"] = window_upper
    return row


def train_pno(
    ens: OperatorEnsemble,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    seed: int = 0,
    jobs: int = 1,
    on_iteration: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Pretrain, then run ``cfg.train_iters`` iterations of rollout-regularized training.

    Raises:
        TrainingAbortedError: more than ``max_failure_fraction`` of a rollout
            batch failed to integrate.
    """
    rng = np.random.default_rng(seed)
    game = ens.game
    horizon = game.horizon
    ens, pre_report = pretrain(ens, cfg, rng, ens.sign_convention)

    flat = ens.flat_parameters()
    mask = ens.slope_mask()
    opt = OptimizerState.zeros(flat.size, cfg.learning_rate)
    total_steps = cfg.train_iters * cfg.gradient_steps
    window = time_window(0, cfg.train_iters, horizon, period=cfg.resample_period)
    pool = uniform_pool(
        rng, cfg.rollout_count, cfg.box, window, cfg.theta_training_set,
        ensemble_residual_fn(ens), rollout_cfg.dt_grid,
    )
    targets: Optional[BundleTargets] = None
    metrics: List[Dict[str, float]] = []
    failed_total = 0

    for iteration in range(cfg.train_iters):
        num_epoch = iteration
        window = time_window(num_epoch, cfg.train_iters, horizon, period=cfg.resample_period)
        residual_batch = ResidualBatch(
            cfg.box.sample_states(rng, cfg.residual_points),
            sample_times(rng, cfg.residual_points, window),
            sample_thetas(rng, cfg.residual_points, cfg.theta_training_set),
        )
        boundary_batch = sample_boundary(rng, cfg, cfg.boundary_points)

        if num_epoch % cfg.resample_period == 0:
            pool = evolve_samples(
                pool, ensemble_residual_fn(ens), rng, cfg.box, window, cfg.theta_training_set, rollout_cfg.dt_grid
            )
            bundles, failures = rollout_batch(
                ens, pool.states, pool.times, [tuple(p) for p in pool.thetas], rollout_cfg, jobs
            )
            failed_total += len(failures)
            if len(failures) > cfg.max_failure_fraction * len(pool):
                raise TrainingAbortedError(
                    f"{len(failures)} of {len(pool)} rollouts failed at iteration {iteration}"
                )
            targets = BundleTargets.from_bundles(bundles)
            logger.debug("Iteration %d: %d bundles, %d in-bounds samples", iteration, len(bundles), len(targets))

        first_report = None
        for step in range(cfg.gradient_steps):
            global_step = iteration * cfg.gradient_steps + step
            lr = learning_rate_at(global_step, total_steps, cfg.learning_rate, cfg.min_learning_rate, cfg.lr_schedule)
            report, grad = loss_and_gradient(
                ens, residual_batch, boundary_batch, targets, weights, cfg.loss_reduction, ens.sign_convention
            )
            if first_report is None:
                first_report = report
            flat, opt = optimizer_step(flat, grad, opt.with_learning_rate(lr), mask)
            ens = ens.with_flat_parameters(flat)

        row = metrics_row(iteration, first_report, window[1])
        metrics.append(row)
        logger.info(
            "iter %d loss %.4e (%s) mean residual %.3e window [0, %.2f]",
            iteration, row["loss_total"],
            ", ".join(f"{name}={first_report.terms[name]:.3e}" for name in TERM_NAMES),
            row["mean_residual"], window[1],
        )
        if on_iteration is not None:
            on_iteration(row)

    return TrainResult(ens, metrics, pre_report, failed_total)
