"""
Two vehicles crossing an uncontrolled intersection.

Each vehicle has position d (m) and speed v (m/s) with d' = v, v' = u,
u in [u_min, u_max]. Stage loss u^2, terminal loss -mu d + (v - v_bar)^2, and
a collision penalty b * sigma(d_own, theta_own) * sigma(d_other, 1) where
sigma is a product of two logistic roll-offs around the crossing zone.

Values follow the maximizing convention (value = -cost), so the optimal
control is clip(lambda_v / 2) and lambda(T) = -grad g.
"""
import hashlib
from dataclasses import asdict, dataclass
from typing import Any, List, NamedTuple, Sequence, Tuple

import numpy as np
import yaml
from scipy.special import expit

from .base_game import DifferentialGame, clip

THETA_SPACE: Tuple[int, ...] = (1, 2, 3, 4, 5)


class JointState(NamedTuple):
    d1: float
    v1: float
    d2: float
    v2: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


class Costate(NamedTuple):
    """Player i's value gradient over the joint state, own frame."""

    l_d_own: float
    l_v_own: float
    l_d_other: float
    l_v_other: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


@dataclass(frozen=True)
class GameGeometry:
    R: float = 70.0
    L: float = 3.0
    W: float = 1.5
    gamma: float = 5.0
    b: float = 1e4
    u_min: float = -5.0
    u_max: float = 10.0
    v_bar: float = 18.0
    mu: float = 1e-6
    T: float = 3.0

    def validation_errors(self, allow_zero_penalty: bool = True) -> List[str]:
        errors = []
        if not self.u_min < self.u_max:
            errors.append(f"u_min ({self.u_min}) must be below u_max ({self.u_max})")
        if self.gamma <= 0:
            errors.append("gamma must be positive")
        if self.b < 0 or (self.b == 0 and not allow_zero_penalty):
            errors.append("b must be positive")
        if self.T <= 0:
            errors.append("T must be positive")
        if not self.R > self.L + self.W:
            errors.append(f"R ({self.R}) must exceed L + W ({self.L + self.W})")
        return errors

    def to_dict(self) -> dict:
        return {key: float(value) for key, value in asdict(self).items()}

    def geometry_hash(self) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def zone(self, theta: int) -> Tuple[float, float]:
        """Closed collision interval [R/2 - theta W/2, (R+W)/2 + L]."""
        return self.R / 2.0 - theta * self.W / 2.0, (self.R + self.W) / 2.0 + self.L

    def describe(self) -> str:
        return ",".join(f"{key}={value:g}" for key, value in self.to_dict().items())


class IntersectionGame(DifferentialGame):
    """The intersection game of a given geometry."""

    state_dim = 4
    player_dim = 2
    type_space = THETA_SPACE

    def __init__(self, geometry: GameGeometry = GameGeometry()):
        self.geometry = geometry

    def __repr__(self) -> str:
        return f"IntersectionGame({self.geometry.describe()})"

    @property
    def horizon(self) -> float:
        return self.geometry.T

    @property
    def control_bounds(self) -> Tuple[float, float]:
        return self.geometry.u_min, self.geometry.u_max

    def dynamics(self, state: np.ndarray, u1: Any, u2: Any) -> np.ndarray:
        s = np.asarray(state, dtype=np.float64)
        u1 = np.broadcast_to(np.asarray(u1, dtype=np.float64), s[..., 0].shape)
        u2 = np.broadcast_to(np.asarray(u2, dtype=np.float64), s[..., 0].shape)
        return np.stack([s[..., 1], u1, s[..., 3], u2], axis=-1)

    def stage_loss(self, u: Any) -> Any:
        return u * u

    def sigma(self, d: Any, theta: int) -> np.ndarray:
        g = self.geometry
        lo, hi = g.zone(theta)
        return expit(g.gamma * (d - lo)) * expit(-g.gamma * (d - hi))

    def sigma_derivative(self, d: Any, theta: int) -> np.ndarray:
        g = self.geometry
        lo, hi = g.zone(theta)
        rise = expit(g.gamma * (d - lo))
        fall = expit(-g.gamma * (d - hi))
        return g.gamma * rise * (1.0 - rise) * fall - g.gamma * rise * fall * (1.0 - fall)

    def _positions(self, state: np.ndarray, player: int) -> Tuple[np.ndarray, np.ndarray]:
        own = self.to_player_frame(np.asarray(state, dtype=np.float64), player)
        return own[..., 0], own[..., 2]

    def penalty(self, state: np.ndarray, theta_own: int, player: int = 1) -> np.ndarray:
        d_own, d_other = self._positions(state, player)
        return self.geometry.b * self.sigma(d_own, theta_own) * self.sigma(d_other, 1)

    def penalty_gradient(self, state: np.ndarray, theta_own: int, player: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        d_own, d_other = self._positions(state, player)
        b = self.geometry.b
        d_own_grad = b * self.sigma_derivative(d_own, theta_own) * self.sigma(d_other, 1)
        d_other_grad = b * self.sigma(d_own, theta_own) * self.sigma_derivative(d_other, 1)
        return d_own_grad, d_other_grad

    def terminal_loss_and_gradient(self, x_own: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x_own, dtype=np.float64)
        g = self.geometry
        d, v = x[..., 0], x[..., 1]
        loss = -g.mu * d + (v - g.v_bar) ** 2
        grad = np.stack([np.full_like(d, -g.mu), 2.0 * (v - g.v_bar)], axis=-1)
        return loss, grad

    def costate_dynamics(self, lam: np.ndarray, state: np.ndarray, theta_own: int, player: int = 1) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        dc_own, dc_other = self.penalty_gradient(state, theta_own, player)
        return np.stack([dc_own, -lam[..., 0], dc_other, -lam[..., 2]], axis=-1)

    def optimal_control(self, lam_v: Any) -> Any:
        """clip(lambda_v_own / 2)."""
        return clip(lam_v / 2.0, self.geometry.u_min, self.geometry.u_max)

    def hamiltonian(self, lam: Any, own_state: Any, u_own: Any, u_other: Any, penalty: Any) -> Any:
        return (
            lam[..., 0] * own_state[..., 1]
            + lam[..., 1] * u_own
            + lam[..., 2] * own_state[..., 3]
            + lam[..., 3] * u_other
            - (u_own * u_own + penalty)
        )

    def collision_indicator(self, state: np.ndarray, thetas: Sequence[int]) -> np.ndarray:
        """True iff both positions sit inside their closed theta-scaled intervals."""
        s = np.asarray(state, dtype=np.float64)
        lo1, hi1 = self.geometry.zone(thetas[0])
        lo2, hi2 = self.geometry.zone(thetas[1])
        d1, d2 = s[..., 0], s[..., 2]
        return (d1 >= lo1) & (d1 <= hi1) & (d2 >= lo2) & (d2 <= hi2)
