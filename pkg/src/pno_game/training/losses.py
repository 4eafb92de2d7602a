"""
Loss terms for value/costate operators.

Everything here works on an ``EnsembleView`` so gradients flow back to one
flat parameter tensor. Sample arrays are numpy and in the global frame; each
player's quantities are evaluated in that player's own frame.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..exceptions import NonFiniteLossError
from ..game.intersection import IntersectionGame
from ..models.operator import EnsembleView, OperatorEnsemble
from ..solvers.bvp import SupervisedDataset
from ..solvers.rollout import TrajectoryBundle

logger = logging.getLogger(__name__)

TERM_NAMES = ("pde", "bc", "C2", "C3", "C4", "C5")


@dataclass(frozen=True)
class LossWeights:
    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0
    C4: float = 1.0
    C5: float = 1.0

    def validation_errors(self) -> List[str]:
        return [f"{name} must be nonnegative" for name, value in asdict(self).items() if value < 0]


@dataclass(frozen=True, eq=False)
class ResidualBatch:
    """Collocation points (x, t, theta) for the HJI residual."""

    states: np.ndarray
    times: np.ndarray
    thetas: np.ndarray

    def __len__(self) -> int:
        return int(self.times.size)

    @classmethod
    def empty(cls) -> "ResidualBatch":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 2), dtype=np.int64))


@dataclass(frozen=True, eq=False)
class BoundaryBatch:
    """Terminal-time states and types."""

    states: np.ndarray
    thetas: np.ndarray

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @classmethod
    def empty(cls) -> "BoundaryBatch":
        return cls(np.zeros((0, 4)), np.zeros((0, 2), dtype=np.int64))


@dataclass(frozen=True, eq=False)
class BundleTargets:
    """In-bounds rollout samples flattened across bundles.

    ``values`` (n, 2) and ``costates`` (n, 2, 4) are the backward targets;
    ``terminal_*`` hold each bundle's final state for the terminal-costate term.
    """

    states: np.ndarray
    times: np.ndarray
    thetas: np.ndarray
    values: np.ndarray
    costates: np.ndarray
    terminal_states: np.ndarray
    terminal_thetas: np.ndarray

    def __len__(self) -> int:
        return int(self.times.size)

    @classmethod
    def from_bundles(cls, bundles: Sequence[TrajectoryBundle]) -> "BundleTargets":
        if not bundles:
            return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 2), np.int64), np.zeros((0, 2)),
                       np.zeros((0, 2, 4)), np.zeros((0, 4)), np.zeros((0, 2), np.int64))
        keep = [b.in_bounds for b in bundles]
        return cls(
            states=np.concatenate([b.states[m] for b, m in zip(bundles, keep)]),
            times=np.concatenate([b.times[m] for b, m in zip(bundles, keep)]),
            thetas=np.concatenate([np.tile(b.thetas, (int(m.sum()), 1)) for b, m in zip(bundles, keep)]).astype(np.int64),
            values=np.concatenate([b.values[m] for b, m in zip(bundles, keep)]),
            costates=np.concatenate([b.backward_costates[m] for b, m in zip(bundles, keep)]),
            terminal_states=np.array([b.states[-1] for b in bundles if b.in_bounds[-1]], dtype=np.float64).reshape(-1, 4),
            terminal_thetas=np.array([b.thetas for b in bundles if b.in_bounds[-1]], dtype=np.int64).reshape(-1, 2),
        )


@dataclass
class LossReport:
    total: float
    terms: Dict[str, float] = field(default_factory=dict)
    mean_residual: float = 0.0


def reduce_loss(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if x.numel() == 0:
        return torch.zeros((), dtype=x.dtype)
    return x.sum() if reduction == "sum" else x.mean()


def _own(game: IntersectionGame, states: np.ndarray, player: int) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(game.to_player_frame(states, player), dtype=np.float64))


def hji_residuals(
    view: EnsembleView,
    game: IntersectionGame,
    states: np.ndarray,
    times: np.ndarray,
    thetas: np.ndarray,
    create_graph: bool = True,
) -> torch.Tensor:
    """HJI residuals (B, 2): d_t value_i + max_u H_i, with the fellow
    player's control taken from their own value gradient."""
    states = np.asarray(states, dtype=np.float64).reshape(-1, 4)
    thetas = np.asarray(thetas, dtype=np.int64).reshape(-1, 2)
    t = torch.from_numpy(np.asarray(times, dtype=np.float64).reshape(-1))
    owns, grads, dts = {}, {}, {}
    for player in (1, 2):
        owns[player] = _own(game, states, player)
        _, grads[player], dts[player] = view.value_and_gradient(player, owns[player], t, thetas, create_graph)
    controls = {player: game.optimal_control(grads[player][:, 1]) for player in (1, 2)}
    residuals = []
    for player, other in ((1, 2), (2, 1)):
        penalty = torch.from_numpy(game.penalty(states, thetas[:, player - 1], player))
        hamiltonian = game.hamiltonian(grads[player], owns[player], controls[player], controls[other], penalty)
        residuals.append(dts[player] + hamiltonian)
    return torch.stack(residuals, dim=-1)


def pde_residual(ens: OperatorEnsemble, x: Sequence[float], t: float, thetas: Sequence[int], player: int) -> float:
    """HJI residual of one player at one point."""
    ens.game.check_time(t)
    pair = np.asarray(ens.game.validate_thetas(thetas)).reshape(1, 2)
    residuals = hji_residuals(ens.view(), ens.game, np.asarray(x).reshape(1, 4), np.array([t]), pair, create_graph=False)
    return float(residuals[0, player - 1].detach())


def boundary_residuals(
    view: EnsembleView, game: IntersectionGame, batch: BoundaryBatch, sign_convention: str = "maximizing"
) -> torch.Tensor:
    """value_i(x, T) + g_i (maximizing) or value_i(x, T) - g_i (printed), shape (B, 2)."""
    t = torch.full((len(batch),), game.horizon, dtype=torch.float64)
    columns = []
    for player in (1, 2):
        own = _own(game, batch.states, player)
        value = view.value(player, own, t, batch.thetas)
        g, _ = game.terminal_loss_and_gradient(own[:, :2].numpy())
        g = torch.from_numpy(np.asarray(g))
        columns.append(value + g if sign_convention == "maximizing" else value - g)
    return torch.stack(columns, dim=-1)


def terminal_costate_residuals(
    view: EnsembleView, game: IntersectionGame, states: np.ndarray, thetas: np.ndarray
) -> torch.Tensor:
    """lambda_hat_i(x, T) - lambda_i(T) per component, shape (B, 2, 4)."""
    t = torch.full((states.shape[0],), game.horizon, dtype=torch.float64)
    columns = []
    for player in (1, 2):
        lam = view.costate(player, _own(game, states, player), t, thetas)
        target = torch.from_numpy(game.terminal_costate(states, player))
        columns.append(lam - target)
    return torch.stack(columns, dim=1)


def _check_finite(terms: Dict[str, torch.Tensor]) -> None:
    for name, value in terms.items():
        scalar = float(value.detach())
        if not np.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)


def pno_loss(
    view: EnsembleView,
    game: IntersectionGame,
    residual_batch: ResidualBatch,
    boundary_batch: BoundaryBatch,
    targets: Optional[BundleTargets],
    weights: LossWeights = LossWeights(),
    reduction: str = "sum",
    sign_convention: str = "maximizing",
) -> Tuple[torch.Tensor, LossReport]:
    """L1 loss over PDE, boundary and rollout terms, summed over both players.

    Terms: pde = |HJI residual| on the residual batch, bc = C1 |boundary
    residual|, C2 |value - backward value|, C3 |value gradient - backward
    costate|, C4 |costate net - backward costate|, C5 |costate net at T -
    terminal costate|. Rollout terms use only in-bounds samples.

    Raises:
        NonFiniteLossError: naming the first non-finite term.
    """
    zero = torch.zeros((), dtype=torch.float64)
    terms: Dict[str, torch.Tensor] = {name: zero for name in TERM_NAMES}
    mean_residual = 0.0

    if len(residual_batch):
        res = hji_residuals(view, game, residual_batch.states, residual_batch.times, residual_batch.thetas)
        terms["pde"] = reduce_loss(res.abs(), reduction)
        mean_residual = float(res.detach().abs().mean())
    if len(boundary_batch) and weights.C1:
        terms["bc"] = weights.C1 * reduce_loss(boundary_residuals(view, game, boundary_batch, sign_convention).abs(), reduction)

    if targets is not None and len(targets):
        t = torch.from_numpy(targets.times)
        value_err, grad_err, costate_err = [], [], []
        for player in (1, 2):
            own = _own(game, targets.states, player)
            lam_target = torch.from_numpy(targets.costates[:, player - 1])
            if weights.C2 or weights.C3:
                value, grad_x, _ = view.value_and_gradient(player, own, t, targets.thetas)
                value_err.append((value - torch.from_numpy(targets.values[:, player - 1])).abs())
                grad_err.append((grad_x - lam_target).abs())
            if weights.C4 and view.ensemble.has_costate:
                costate_err.append((view.costate(player, own, t, targets.thetas) - lam_target).abs())
        if value_err:
            terms["C2"] = weights.C2 * reduce_loss(torch.stack(value_err), reduction)
            terms["C3"] = weights.C3 * reduce_loss(torch.stack(grad_err), reduction)
        if costate_err:
            terms["C4"] = weights.C4 * reduce_loss(torch.stack(costate_err), reduction)
        if weights.C5 and view.ensemble.has_costate and targets.terminal_states.shape[0]:
            terminal = terminal_costate_residuals(view, game, targets.terminal_states, targets.terminal_thetas)
            terms["C5"] = weights.C5 * reduce_loss(terminal.abs(), reduction)

    _check_finite(terms)
    total = sum(terms.values(), zero)
    report = LossReport(float(total.detach()), {k: float(v.detach()) for k, v in terms.items()}, mean_residual)
    return total, report


def supervised_loss(
    view: EnsembleView,
    game: IntersectionGame,
    dataset: SupervisedDataset,
    costate_targets: bool = True,
    costate_weight: float = 1.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """|value - target| (+ costate_weight |value gradient - costate target|) per record."""
    total = torch.zeros((), dtype=torch.float64)
    for player in (1, 2):
        part = dataset.for_player(player)
        if not len(part):
            continue
        own = _own(game, part.states, player)
        t = torch.from_numpy(part.times)
        if costate_targets:
            value, grad_x, _ = view.value_and_gradient(player, own, t, part.thetas)
            total = total + costate_weight * reduce_loss((grad_x - torch.from_numpy(part.costates)).abs(), reduction)
        else:
            value = view.value(player, own, t, part.thetas)
        total = total + reduce_loss((value - torch.from_numpy(part.values)).abs(), reduction)
    return total


def flat_gradient(total: torch.Tensor, flat: torch.Tensor) -> np.ndarray:
    """d total / d flat as numpy; unused parameters get zeros."""
    if not total.requires_grad:
        return np.zeros(flat.numel())
    (grad,) = torch.autograd.grad(total, flat, allow_unused=True)
    if grad is None:
        return np.zeros(flat.numel())
    return grad.detach().numpy().copy()


def loss_and_gradient(
    ens: OperatorEnsemble,
    residual_batch: ResidualBatch,
    boundary_batch: BoundaryBatch,
    targets: Optional[BundleTargets],
    weights: LossWeights = LossWeights(),
    reduction: str = "sum",
    sign_convention: str = "maximizing",
) -> Tuple[LossReport, np.ndarray]:
    """pno_loss and its gradient with respect to ``ens.flat_parameters()``."""
    flat = torch.tensor(ens.flat_parameters(), dtype=torch.float64, requires_grad=True)
    total, report = pno_loss(
        ens.view(flat), ens.game, residual_batch, boundary_batch, targets, weights, reduction, sign_convention
    )
    return report, flat_gradient(total, flat)
