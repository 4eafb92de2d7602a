"""
Branch x trunk value operators and costate operators for both players.

For player i with types theta (own first) the value is

    value_i(x, t, theta) = value_scale * sum_k b_k(a(X, theta)) t_k(x, t)

where a(X, theta) are the constraint-indicator bits on a fixed lattice X, the
branch net b maps those bits to q coefficients and the trunk net t maps the
normalized own-frame state and time to q basis values. The costate operator
has the same construction with a trunk of 4q outputs, read as a (4, q) block.

All per-player inputs and outputs are in the player's own frame
(d_own, v_own, d_other, v_other).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..exceptions import DimensionMismatchError, PnoError
from ..game.intersection import Costate, IntersectionGame
from .autodiff_net import (
    DTYPE,
    ActivationKind,
    NetworkShape,
    ParameterSet,
    apply_flat,
    init_network,
)

logger = logging.getLogger(__name__)

NET_NAMES = ("value_branch", "value_trunk", "costate_branch", "costate_trunk")


class PolicySource(str, Enum):
    VALUE_GRADIENT = "value-gradient"
    COSTATE = "costate-net"


@dataclass(frozen=True)
class LatticeSpec:
    """Lattice on which the constraint indicator is sampled for the branch input.

    ``position`` mode spans (d_own, d_other) with ``resolution`` nodes per axis;
    ``full`` mode spans (d_own, v_own, d_other, v_other). Nodes are ordered
    row-major with the first axis slowest (numpy ``indexing="ij"``).
    """

    d_bounds: Tuple[float, float] = (15.0, 105.0)
    v_bounds: Tuple[float, float] = (15.0, 32.0)
    resolution: Tuple[int, ...] = (31, 31)
    mode: str = "position"

    def __post_init__(self):
        object.__setattr__(self, "d_bounds", tuple(float(x) for x in self.d_bounds))
        object.__setattr__(self, "v_bounds", tuple(float(x) for x in self.v_bounds))
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        expected = 2 if self.mode == "position" else 4
        if self.mode not in ("position", "full") or len(self.resolution) != expected:
            raise DimensionMismatchError(
                f"Lattice mode '{self.mode}' needs {expected} resolutions, got {self.resolution}"
            )

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    def nodes(self) -> np.ndarray:
        """Node coordinates as own-frame joint states, shape (N, 4).

        In position mode velocities are set to the midpoint of ``v_bounds``;
        the constraint indicator ignores them.
        """
        if self.mode == "position":
            d_own = np.linspace(*self.d_bounds, self.resolution[0])
            d_other = np.linspace(*self.d_bounds, self.resolution[1])
            g1, g2 = np.meshgrid(d_own, d_other, indexing="ij")
            v_mid = 0.5 * (self.v_bounds[0] + self.v_bounds[1])
            return np.stack([g1.ravel(), np.full(g1.size, v_mid), g2.ravel(), np.full(g1.size, v_mid)], axis=1)
        axes = [
            np.linspace(*self.d_bounds, self.resolution[0]),
            np.linspace(*self.v_bounds, self.resolution[1]),
            np.linspace(*self.d_bounds, self.resolution[2]),
            np.linspace(*self.v_bounds, self.resolution[3]),
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


def encode_theta(lattice: LatticeSpec, thetas: Sequence[int], game: IntersectionGame) -> np.ndarray:
    """Indicator bits a(X, theta) on the lattice; ``thetas`` is (own, other)."""
    pair = game.validate_thetas(thetas)
    return game.collision_indicator(lattice.nodes(), pair).astype(np.uint8)


@dataclass(frozen=True)
class Normalizer:
    """Affine map of own-frame (d, v, d, v, t) into [-1, 1] plus output scales."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    value_scale: float = 1.0
    costate_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))

    @classmethod
    def from_box(
        cls,
        d_bounds: Sequence[float],
        v_bounds: Sequence[float],
        horizon: float,
        value_scale: float = 1.0,
        costate_scale: float = 1.0,
    ) -> "Normalizer":
        lower = (d_bounds[0], v_bounds[0], d_bounds[0], v_bounds[0], 0.0)
        upper = (d_bounds[1], v_bounds[1], d_bounds[1], v_bounds[1], horizon)
        return cls(lower, upper, value_scale, costate_scale)

    def normalize(self, z: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return 2.0 * (np.asarray(z) - lo) / (hi - lo) - 1.0

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (np.asarray(y) + 1.0) * (hi - lo) / 2.0

    def normalize_torch(self, z: torch.Tensor) -> torch.Tensor:
        lo = torch.tensor(self.lower, dtype=DTYPE)
        hi = torch.tensor(self.upper, dtype=DTYPE)
        return 2.0 * (z - lo) / (hi - lo) - 1.0


@dataclass(frozen=True, eq=False)
class PlayerNets:
    value_branch: ParameterSet
    value_trunk: ParameterSet
    costate_branch: Optional[ParameterSet] = None
    costate_trunk: Optional[ParameterSet] = None

    def named(self) -> List[Tuple[str, ParameterSet]]:
        return [(name, getattr(self, name)) for name in NET_NAMES if getattr(self, name) is not None]


def _spawn_seeds(seed: int, count: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


@dataclass(eq=False)
class OperatorEnsemble:
    """Value operators (and, for PNO, costate operators) of both players."""

    players: Tuple[PlayerNets, PlayerNets]
    basis_count: int
    lattice: LatticeSpec
    normalizer: Normalizer
    game: IntersectionGame
    sign_convention: str = "maximizing"
    seed: int = 0
    _bits: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)
    _eval_view: Optional["EnsembleView"] = field(default=None, repr=False)

    @classmethod
    def initialize(
        cls,
        game: IntersectionGame,
        lattice: LatticeSpec,
        normalizer: Normalizer,
        hidden_widths: Sequence[int] = (64, 64, 64),
        basis_count: int = 64,
        activation: ActivationKind = ActivationKind(),
        seed: int = 0,
        with_costate: bool = True,
        sign_convention: str = "maximizing",
    ) -> "OperatorEnsemble":
        seeds = iter(_spawn_seeds(seed, 8))
        hidden = tuple(hidden_widths)
        players = []
        for _ in range(2):
            value_branch = init_network(NetworkShape(lattice.size, hidden, basis_count), activation, next(seeds))
            value_trunk = init_network(NetworkShape(5, hidden, basis_count), activation, next(seeds))
            costate_branch = costate_trunk = None
            branch_seed, trunk_seed = next(seeds), next(seeds)
            if with_costate:
                costate_branch = init_network(NetworkShape(lattice.size, hidden, basis_count), activation, branch_seed)
                costate_trunk = init_network(NetworkShape(5, hidden, 4 * basis_count), activation, trunk_seed)
            players.append(PlayerNets(value_branch, value_trunk, costate_branch, costate_trunk))
        return cls(tuple(players), basis_count, lattice, normalizer, game, sign_convention, seed)

    @property
    def has_costate(self) -> bool:
        return all(p.costate_trunk is not None for p in self.players)

    @property
    def activation(self) -> ActivationKind:
        return self.players[0].value_trunk.activation

    def parameter_blocks(self) -> List[Tuple[str, ParameterSet]]:
        """Networks in checkpoint order: player 1 then player 2, value before costate."""
        blocks = []
        for idx, nets in enumerate(self.players, start=1):
            blocks.extend((f"player{idx}.{name}", params) for name, params in nets.named())
        return blocks

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([params.values for _, params in self.parameter_blocks()])

    def slope_mask(self) -> np.ndarray:
        return np.concatenate([params.slope_mask() for _, params in self.parameter_blocks()])

    def with_flat_parameters(self, values: np.ndarray) -> "OperatorEnsemble":
        values = np.asarray(values, dtype=np.float64)
        offset = 0
        players = []
        for nets in self.players:
            updated = {}
            for name, params in nets.named():
                updated[name] = params.with_values(values[offset: offset + len(params)])
                offset += len(params)
            players.append(PlayerNets(**updated))
        if offset != values.size:
            raise DimensionMismatchError(f"Flat vector has {values.size} entries, ensemble needs {offset}")
        return OperatorEnsemble(
            tuple(players), self.basis_count, self.lattice, self.normalizer, self.game,
            self.sign_convention, self.seed, self._bits,
        )

    def bits(self, thetas: Sequence[int], player: int) -> np.ndarray:
        """Branch input for ``player`` given global (theta1, theta2)."""
        pair = tuple(int(t) for t in thetas)
        own_pair = pair if player == 1 else (pair[1], pair[0])
        if own_pair not in self._bits:
            self._bits[own_pair] = encode_theta(self.lattice, own_pair, self.game).astype(np.float64)
        return self._bits[own_pair]

    def view(self, flat: Optional[torch.Tensor] = None) -> "EnsembleView":
        """Torch evaluator over ``flat`` (defaults to the current parameters)."""
        if flat is None:
            flat = torch.from_numpy(self.flat_parameters())
        return EnsembleView(self, flat)

    def _evaluator(self) -> "EnsembleView":
        if self._eval_view is None:
            self._eval_view = self.view()
        return self._eval_view

    # point and batch queries on numpy inputs -----------------------------

    def _prepare(self, states: np.ndarray, t, thetas, player: int):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        times = np.broadcast_to(np.asarray(t, dtype=np.float64), states.shape[:1]).copy()
        self.game.check_time(times)
        pairs = np.broadcast_to(np.asarray(thetas, dtype=np.int64), (states.shape[0], 2))
        own = torch.from_numpy(np.ascontiguousarray(self.game.to_player_frame(states, player)))
        return own, torch.from_numpy(times), pairs

    def value_batch(self, states: np.ndarray, t, thetas, player: int) -> np.ndarray:
        own, times, pairs = self._prepare(states, t, thetas, player)
        with torch.no_grad():
            return self._evaluator().value(player, own, times, pairs).numpy()

    def value_gradient_batch(self, states: np.ndarray, t, thetas, player: int) -> Tuple[np.ndarray, np.ndarray]:
        own, times, pairs = self._prepare(states, t, thetas, player)
        _, grad_x, grad_t = self._evaluator().value_and_gradient(player, own, times, pairs, create_graph=False)
        return grad_x.detach().numpy(), grad_t.detach().numpy()

    def costate_batch(self, states: np.ndarray, t, thetas, player: int) -> np.ndarray:
        if not self.has_costate:
            raise PnoError("This ensemble has no costate networks")
        own, times, pairs = self._prepare(states, t, thetas, player)
        with torch.no_grad():
            return self._evaluator().costate(player, own, times, pairs).numpy()

    def value_basis_batch(self, states: np.ndarray, t, player: int) -> np.ndarray:
        own, times, _ = self._prepare(states, t, (1, 1), player)
        with torch.no_grad():
            return self._evaluator().value_basis(player, own, times).numpy()

    def branch_coefficients(self, thetas: Sequence[int], player: int, kind: str = "value") -> np.ndarray:
        with torch.no_grad():
            return self._evaluator().branch(player, kind, thetas).numpy().copy()

    def value(self, state: Sequence[float], t: float, thetas: Sequence[int]) -> Tuple[float, float]:
        """(value_1, value_2) at one global joint state."""
        return (
            float(self.value_batch(state, t, thetas, 1)[0]),
            float(self.value_batch(state, t, thetas, 2)[0]),
        )

    def value_gradient(
        self, state: Sequence[float], t: float, thetas: Sequence[int], player: int
    ) -> Tuple[np.ndarray, float]:
        """(grad_x value_i in the player's frame, d value_i / dt)."""
        grad_x, grad_t = self.value_gradient_batch(state, t, thetas, player)
        return grad_x[0], float(grad_t[0])

    def costate(self, state: Sequence[float], t: float, thetas: Sequence[int], player: int) -> Costate:
        return Costate(*self.costate_batch(state, t, thetas, player)[0])

    def policy(
        self, source: PolicySource, state: Sequence[float], t: float, thetas: Sequence[int], player: int
    ) -> float:
        """clip(lambda_v_own / 2) with lambda from the value gradient or the costate net."""
        source = PolicySource(source)
        if source is PolicySource.VALUE_GRADIENT:
            lam, _ = self.value_gradient(state, t, thetas, player)
        else:
            lam = self.costate(state, t, thetas, player).as_array()
        return float(self.game.optimal_control(lam[1]))

    def controls(self, source: PolicySource, state: np.ndarray, t: float, thetas: Sequence[int]) -> Tuple[float, float]:
        return (
            self.policy(source, state, t, thetas, 1),
            self.policy(source, state, t, thetas, 2),
        )


class EnsembleView:
    """Differentiable evaluation of an ensemble over a flat parameter tensor.

    ``flat`` follows ``OperatorEnsemble.parameter_blocks`` order. Branch
    coefficients are cached per (player, net, theta pair) for the life of the
    view, so one view must not outlive a parameter update.
    """

    def __init__(self, ensemble: OperatorEnsemble, flat: torch.Tensor):
        self.ensemble = ensemble
        self.flat = flat
        self._nets: Dict[Tuple[int, str], Tuple[torch.Tensor, ParameterSet]] = {}
        offset = 0
        for idx, nets in enumerate(ensemble.players, start=1):
            for name, params in nets.named():
                self._nets[(idx, name)] = (flat[offset: offset + len(params)], params)
                offset += len(params)
        self._coefficients: Dict[Tuple[int, str, Tuple[int, int]], torch.Tensor] = {}

    def _apply(self, player: int, name: str, x: torch.Tensor) -> torch.Tensor:
        flat, params = self._nets[(player, name)]
        return apply_flat(flat, params.shape, params.activation, x)

    def branch(self, player: int, kind: str, thetas: Sequence[int]) -> torch.Tensor:
        """Branch coefficients (q,) for ``kind`` in {"value", "costate"}."""
        pair = (int(thetas[0]), int(thetas[1]))
        key = (player, kind, pair)
        if key not in self._coefficients:
            bits = torch.from_numpy(self.ensemble.bits(pair, player)).unsqueeze(0)
            self._coefficients[key] = self._apply(player, f"{kind}_branch", bits)[0]
        return self._coefficients[key]

    def coefficients(self, player: int, kind: str, pairs: np.ndarray) -> torch.Tensor:
        """Per-sample branch coefficients (B, q) for global theta pairs (B, 2)."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
        stacked = torch.stack([self.branch(player, kind, row) for row in unique])
        return stacked[torch.from_numpy(np.asarray(inverse).reshape(-1))]

    def trunk_input(self, own: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.ensemble.normalizer.normalize_torch(torch.cat([own, t.unsqueeze(-1)], dim=-1))

    def value_basis(self, player: int, own: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Trunk outputs t_k (B, q)."""
        return self._apply(player, "value_trunk", self.trunk_input(own, t))

    def value(self, player: int, own: torch.Tensor, t: torch.Tensor, pairs: np.ndarray) -> torch.Tensor:
        basis = self.value_basis(player, own, t)
        coeff = self.coefficients(player, "value", pairs)
        return self.ensemble.normalizer.value_scale * (coeff * basis).sum(dim=-1)

    def value_and_gradient(
        self, player: int, own: torch.Tensor, t: torch.Tensor, pairs: np.ndarray, create_graph: bool = True
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Value, raw-unit state gradient (B, 4) and time derivative (B,)."""
        own_in = own.detach().clone().requires_grad_(True)
        t_in = t.detach().clone().requires_grad_(True)
        value = self.value(player, own_in, t_in, pairs)
        grad_x, grad_t = torch.autograd.grad(value.sum(), (own_in, t_in), create_graph=create_graph)
        return value, grad_x, grad_t

    def costate(self, player: int, own: torch.Tensor, t: torch.Tensor, pairs: np.ndarray) -> torch.Tensor:
        q = self.ensemble.basis_count
        basis = self._apply(player, "costate_trunk", self.trunk_input(own, t)).reshape(-1, 4, q)
        coeff = self.coefficients(player, "costate", pairs)
        return self.ensemble.normalizer.costate_scale * torch.einsum("bq,bjq->bj", coeff, basis)
