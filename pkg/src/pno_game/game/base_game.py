"""
Base class for two-player differential games.

Concrete games supply dynamics, losses and penalties; the base class builds the
Pontryagin quantities (Hamiltonian maximization, terminal costates, running
cost) from them. States are global joint arrays with the last axis holding the
players' substates in player order; every per-player quantity (costates,
gradients) is expressed in that player's own frame, where the own substate
comes first.
"""
from abc import ABC, abstractmethod
from typing import Any, Sequence, Tuple

import numpy as np
import torch

from ..exceptions import DomainError


def clip(x: Any, lo: float, hi: float) -> Any:
    """Clip numpy arrays, floats or torch tensors."""
    if isinstance(x, torch.Tensor):
        return x.clamp(lo, hi)
    return np.clip(x, lo, hi)


class DifferentialGame(ABC):
    """Common interface for games the operator, rollout and BVP code can run."""

    #: Dimension of the joint state.
    state_dim: int = 4
    #: Number of substate components per player.
    player_dim: int = 2
    #: Admissible player types.
    type_space: Tuple[int, ...] = ()

    @property
    @abstractmethod
    def horizon(self) -> float:
        """Terminal time T."""

    @property
    @abstractmethod
    def control_bounds(self) -> Tuple[float, float]:
        """(u_min, u_max), shared by both players."""

    @abstractmethod
    def dynamics(self, state: np.ndarray, u1: Any, u2: Any) -> np.ndarray:
        """Time derivative of the global joint state."""

    @abstractmethod
    def stage_loss(self, u: Any) -> Any:
        """Instantaneous control loss l_i."""

    @abstractmethod
    def penalty(self, state: np.ndarray, theta_own: int, player: int) -> np.ndarray:
        """State penalty c_i of ``player`` with aggressiveness ``theta_own``."""

    @abstractmethod
    def penalty_gradient(self, state: np.ndarray, theta_own: int, player: int) -> Tuple[np.ndarray, np.ndarray]:
        """(dc/d d_own, dc/d d_other)."""

    @abstractmethod
    def terminal_loss_and_gradient(self, x_own: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """g_i and its gradient with respect to the own substate."""

    @abstractmethod
    def costate_dynamics(self, lam: np.ndarray, state: np.ndarray, theta_own: int, player: int) -> np.ndarray:
        """d lambda / dt in the player's frame along the characteristic."""

    @abstractmethod
    def optimal_control(self, lam_v: Any) -> Any:
        """Maximizer of the Hamiltonian given the own-velocity costate component."""

    @abstractmethod
    def hamiltonian(self, lam: Any, own_state: Any, u_own: Any, u_other: Any, penalty: Any) -> Any:
        """lambda^T f - (l + c) in the player's frame."""

    @abstractmethod
    def collision_indicator(self, state: np.ndarray, thetas: Sequence[int]) -> np.ndarray:
        """Boolean constraint-violation indicator for the type pair."""

    def validate_thetas(self, thetas: Sequence[int]) -> Tuple[int, int]:
        pair = tuple(int(t) for t in thetas)
        if len(pair) != 2 or any(t not in self.type_space for t in pair):
            raise DomainError(f"Player types {thetas} not in {self.type_space}")
        return pair

    def to_player_frame(self, state: np.ndarray, player: int) -> np.ndarray:
        """Reorder the joint state so ``player``'s substate comes first.

        The map is an involution, so it also converts own-frame vectors back to
        the global frame.
        """
        arr = np.asarray(state)
        if player == 1:
            return arr
        k = self.player_dim
        return np.concatenate([arr[..., k:2 * k], arr[..., :k]], axis=-1)

    def check_time(self, t: Any) -> None:
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > self.horizon) or not np.all(np.isfinite(t_arr)):
            raise DomainError(f"Time outside horizon [0, {self.horizon}]")

    def maximize_hamiltonian(
        self, lam: Sequence[float], state: np.ndarray, theta_own: int, player: int = 1, u_other: float = 0.0
    ) -> Tuple[float, float]:
        """(u*, H(u*)) for one player, the fellow player's control held at ``u_other``."""
        lam_arr = np.asarray(lam, dtype=np.float64)
        u_star = float(self.optimal_control(lam_arr[1]))
        own = self.to_player_frame(np.asarray(state, dtype=np.float64), player)
        c = self.penalty(state, theta_own, player)
        h_star = float(self.hamiltonian(lam_arr, own, u_star, u_other, c))
        return u_star, h_star

    def terminal_costate(self, state: np.ndarray, player: int) -> np.ndarray:
        """lambda_i(T) = -grad g_i, zero on the fellow player's components."""
        own = self.to_player_frame(np.asarray(state, dtype=np.float64), player)
        _, grad = self.terminal_loss_and_gradient(own[..., : self.player_dim])
        lam = np.zeros(own.shape)
        lam[..., : self.player_dim] = -grad
        return lam

    def running_cost(self, state: np.ndarray, u1: Any, u2: Any, thetas: Sequence[int]) -> np.ndarray:
        """(l_1 + c_1, l_2 + c_2) stacked on the last axis."""
        c1 = self.penalty(state, thetas[0], 1)
        c2 = self.penalty(state, thetas[1], 2)
        return np.stack([self.stage_loss(np.asarray(u1)) + c1, self.stage_loss(np.asarray(u2)) + c2], axis=-1)
