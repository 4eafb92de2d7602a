"""
Value-structure exports: value grids on a (d1, d2) slice, per-basis trunk
fields, the basis ranking over a theta sweep and SVG charts of all three.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
# fixed salt so SVG element ids are identical across runs
matplotlib.rcParams["svg.hashsalt"] = "pno-game"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..exceptions import DomainError  # noqa: E402
from ..game.intersection import THETA_SPACE, IntersectionGame  # noqa: E402
from ..models.operator import OperatorEnsemble  # noqa: E402
from ..solvers.bvp import BvpConfig, ContinuationSchedule, solve_bvp  # noqa: E402
from ..solvers.rollout import RolloutConfig  # noqa: E402
from .safety import parallel_map  # noqa: E402

logger = logging.getLogger(__name__)

RANKING_COLUMNS = ("rank", "k", "mean_abs", "std_abs")


@dataclass(frozen=True)
class ValueSlice:
    """Positions on a square grid with both speeds and the time fixed."""

    speed: float = 18.0
    t: float = 0.0
    d_bounds: Tuple[float, float] = (15.0, 105.0)
    resolution: int = 61

    def validate(self, d_box: Sequence[float], v_box: Sequence[float], horizon: float) -> None:
        if not (v_box[0] <= self.speed <= v_box[1]):
            raise DomainError(f"Slice speed {self.speed} outside [{v_box[0]}, {v_box[1]}]")
        if not (d_box[0] <= self.d_bounds[0] < self.d_bounds[1] <= d_box[1]):
            raise DomainError(f"Slice positions {self.d_bounds} outside [{d_box[0]}, {d_box[1]}]")
        if not 0.0 <= self.t <= horizon:
            raise DomainError(f"Slice time {self.t} outside [0, {horizon}]")
        if self.resolution < 2:
            raise DomainError("Slice resolution must be at least 2")

    def states(self) -> np.ndarray:
        """Joint states (resolution**2, 4), d1 slowest."""
        axis = np.linspace(*self.d_bounds, self.resolution)
        d1, d2 = np.meshgrid(axis, axis, indexing="ij")
        speed = np.full(d1.size, self.speed)
        return np.stack([d1.ravel(), speed, d2.ravel(), speed], axis=1)


def export_value_grid(
    ens: OperatorEnsemble,
    thetas: Sequence[int],
    value_slice: ValueSlice = ValueSlice(),
    player: int = 1,
    basis: Sequence[int] = (),
) -> List[Dict[str, float]]:
    """Rows ``d1, d2, value`` plus ``basis_k`` trunk outputs for each k in ``basis``."""
    normalizer = ens.normalizer
    value_slice.validate(
        (normalizer.lower[0], normalizer.upper[0]), (normalizer.lower[1], normalizer.upper[1]), ens.game.horizon
    )
    states = value_slice.states()
    values = ens.value_batch(states, value_slice.t, thetas, player)
    fields = ens.value_basis_batch(states, value_slice.t, player) if len(basis) else None
    rows = []
    for n, state in enumerate(states):
        row = {"d1": float(state[0]), "d2": float(state[2]), "value": float(values[n])}
        for k in basis:
            row[f"basis_{k}"] = float(fields[n, k])
        rows.append(row)
    return rows


def basis_ranking(
    ens: OperatorEnsemble, theta_pairs: Optional[Sequence[Tuple[int, int]]] = None, player: int = 1
) -> List[Dict[str, float]]:
    """Branch coefficients ranked by mean |b_k| over the theta sweep (ties keep index order)."""
    pairs = theta_pairs or [(a, b) for a in THETA_SPACE for b in THETA_SPACE]
    magnitudes = np.abs(np.stack([ens.branch_coefficients(pair, player) for pair in pairs]))
    mean, std = magnitudes.mean(axis=0), magnitudes.std(axis=0)
    order = np.argsort(-mean, kind="stable")
    return [
        {"rank": rank, "k": int(k), "mean_abs": float(mean[k]), "std_abs": float(std[k])}
        for rank, k in enumerate(order, start=1)
    ]


def bvp_value_grid(
    game: IntersectionGame,
    thetas: Sequence[int],
    value_slice: ValueSlice = ValueSlice(),
    player: int = 1,
    cfg: BvpConfig = BvpConfig(),
    rollout_cfg: RolloutConfig = RolloutConfig(),
    jobs: int = 1,
) -> List[Dict[str, float]]:
    """Equilibrium values from a BVP solve at every slice node; failures are NaN."""
    if value_slice.t >= game.horizon:
        raise DomainError("BVP value grids need a slice time before the horizon")
    states = value_slice.states()
    schedule = ContinuationSchedule.geometric(game.geometry.b, cfg.continuation_levels)

    def value_at(n: int) -> float:
        solution = solve_bvp(states[n], value_slice.t, thetas, schedule, game, cfg, rollout_cfg, n)
        return float(solution.bundle.values[0, player - 1]) if solution.converged else float("nan")

    values = parallel_map(value_at, list(range(len(states))), jobs)
    failed = int(np.isnan(values).sum())
    if failed:
        logger.warning("%d of %d BVP grid nodes did not converge", failed, len(states))
    return [
        {"d1": float(state[0]), "d2": float(state[2]), "value": value}
        for state, value in zip(states, values)
    ]


def difference_field(reference: Sequence[Dict[str, float]], other: Sequence[Dict[str, float]]) -> List[Dict[str, float]]:
    """Pointwise |reference - other| of two value grids on the same nodes."""
    if len(reference) != len(other):
        raise DomainError("Value grids have different sizes")
    rows = []
    for a, b in zip(reference, other):
        if (a["d1"], a["d2"]) != (b["d1"], b["d2"]):
            raise DomainError(f"Value grids disagree on node ({a['d1']}, {a['d2']})")
        rows.append({"d1": a["d1"], "d2": a["d2"], "value": abs(a["value"] - b["value"])})
    return rows


def _grid(rows: Sequence[Dict[str, float]], key: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    d1 = np.array([row["d1"] for row in rows])
    d2 = np.array([row["d2"] for row in rows])
    n = int(round(np.sqrt(len(rows))))
    shape = (n, n)
    return d1.reshape(shape), d2.reshape(shape), np.array([row[key] for row in rows]).reshape(shape)


def write_contour_svg(rows: Sequence[Dict[str, float]], path: Path, title: str, key: str = "value") -> Path:
    d1, d2, z = _grid(rows, key)
    fig, ax = plt.subplots(figsize=(6, 5))
    try:
        image = ax.contourf(d1, d2, z, levels=30, cmap="viridis")
        ax.set_title(title)
        ax.set_xlabel("d1 [m]")
        ax.set_ylabel("d2 [m]")
        fig.colorbar(image, ax=ax)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return Path(path)


def write_basis_svg(rows: Sequence[Dict[str, float]], basis: Sequence[int], path: Path) -> Path:
    """One contour panel per exported trunk field."""
    fig, axes = plt.subplots(1, max(1, len(basis)), figsize=(4.5 * max(1, len(basis)), 4), squeeze=False)
    try:
        for ax, k in zip(axes[0], basis):
            d1, d2, z = _grid(rows, f"basis_{k}")
            image = ax.contourf(d1, d2, z, levels=30, cmap="plasma")
            ax.set_title(f"t_{k}")
            ax.set_xlabel("d1 [m]")
            ax.set_ylabel("d2 [m]")
            fig.colorbar(image, ax=ax)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return Path(path)


def write_loss_svg(metrics: Sequence[Dict[str, float]], path: Path, keys: Sequence[str] = ("loss_total",)) -> Path:
    """Log-scale loss curves over iterations."""
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        iterations = [row["iter"] for row in metrics]
        for key in keys:
            values = [max(float(row[key]), 1e-300) for row in metrics]
            ax.plot(iterations, values, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return Path(path)
