"""
Hybrid baseline: value operators fitted to BVP equilibria, then refined with
PDE and boundary losses on a time window that grows back from T.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from ..exceptions import NonFiniteLossError
from ..models.autodiff_net import OptimizerState, optimizer_step
from ..models.operator import OperatorEnsemble
from ..solvers.bvp import SupervisedDataset
from .losses import (
    TERM_NAMES,
    LossReport,
    LossWeights,
    ResidualBatch,
    flat_gradient,
    pno_loss,
    supervised_loss,
)
from .sampling import sample_thetas, sample_times
from .trainer import TrainConfig, TrainResult, learning_rate_at, metrics_row, sample_boundary, time_window

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HybridConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 1000
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    costate_targets: bool = True
    window_direction: str = "backward"

    def validation_errors(self) -> List[str]:
        errors = []
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            errors.append("hybrid stage iteration counts must be nonnegative")
        if self.batch_size <= 0:
            errors.append("hybrid batch_size must be positive")
        if self.window_direction not in ("forward", "backward"):
            errors.append(f"window_direction must be 'forward' or 'backward', got '{self.window_direction}'")
        return errors


def _minibatch(dataset: SupervisedDataset, rng: np.random.Generator, size: int) -> SupervisedDataset:
    if len(dataset) <= size:
        return dataset
    return dataset.subset(rng.choice(len(dataset), size=size, replace=False))


def mean_value_error(ens: OperatorEnsemble, dataset: SupervisedDataset) -> float:
    """Mean |value - target| over the dataset, in units of value_scale."""
    errors = []
    for player in (1, 2):
        part = dataset.for_player(player)
        if len(part):
            predicted = ens.value_batch(part.states, part.times, part.thetas, player)
            errors.append(np.abs(predicted - part.values))
    if not errors:
        return 0.0
    return float(np.concatenate(errors).mean() / ens.normalizer.value_scale)


def train_hybrid(
    ens: OperatorEnsemble,
    dataset: SupervisedDataset,
    cfg: TrainConfig,
    hybrid: HybridConfig = HybridConfig(),
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    on_iteration: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Two-stage supervised + physics training of value operators only.

    Stage 1 regresses values (and value gradients onto costate targets when
    ``hybrid.costate_targets``). Stage 2 adds PDE residuals sampled in the
    curriculum window and C1 boundary residuals.
    """
    if not len(dataset):
        raise ValueError("The supervised dataset is empty")
    rng = np.random.default_rng(seed)
    data = dataset.shuffled(seed)
    game = ens.game
    flat = ens.flat_parameters()
    mask = ens.slope_mask()
    opt = OptimizerState.zeros(flat.size, hybrid.learning_rate)
    total_iters = hybrid.stage1_iters + hybrid.stage2_iters
    metrics: List[Dict[str, float]] = []
    no_rollout_weights = LossWeights(C1=weights.C1, C2=0.0, C3=0.0, C4=0.0, C5=0.0)

    for it in range(total_iters):
        stage2 = it >= hybrid.stage1_iters
        flat_t = torch.tensor(flat, dtype=torch.float64, requires_grad=True)
        view = ens.view(flat_t)
        batch = _minibatch(data, rng, hybrid.batch_size)
        supervised = supervised_loss(
            view, game, batch, hybrid.costate_targets, weights.C3, cfg.loss_reduction
        )
        window = (0.0, game.horizon)
        report = LossReport(float(supervised.detach()), {name: 0.0 for name in TERM_NAMES})
        total = supervised
        if stage2:
            epoch = it - hybrid.stage1_iters
            window = time_window(epoch, hybrid.stage2_iters, game.horizon, hybrid.window_direction, cfg.resample_period)
            residual_batch = ResidualBatch(
                cfg.box.sample_states(rng, cfg.residual_points),
                sample_times(rng, cfg.residual_points, window),
                sample_thetas(rng, cfg.residual_points, cfg.theta_training_set),
            )
            boundary_batch = sample_boundary(rng, cfg, cfg.boundary_points)
            physics, report = pno_loss(
                view, game, residual_batch, boundary_batch, None, no_rollout_weights,
                cfg.loss_reduction, ens.sign_convention,
            )
            total = supervised + physics
        if not np.isfinite(float(total.detach())):
            raise NonFiniteLossError("supervised", float(total.detach()))
        lr = learning_rate_at(it, total_iters, hybrid.learning_rate, cfg.min_learning_rate, hybrid.lr_schedule)
        flat, opt = optimizer_step(flat, flat_gradient(total, flat_t), opt.with_learning_rate(lr), mask)
        ens = ens.with_flat_parameters(flat)

        report.total = float(total.detach())
        row = metrics_row(it, report, window[1] - window[0])
        row["loss_supervised"] = float(supervised.detach())
        metrics.append(row)
        if it % 100 == 0:
            logger.info(
                "hybrid %s iter %d loss %.4e supervised %.4e",
                "stage2" if stage2 else "stage1", it, row["loss_total"], row["loss_supervised"],
            )
        if on_iteration is not None:
            on_iteration(row)

    return TrainResult(ens, metrics)
