"""
Run configuration: sectioned YAML files, profiles and the config hash.

A file may set any subset of keys; missing keys take the profile's value and
then the section default. Unknown keys are rejected by ConfigValidator.
"""
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from ..exceptions import ConfigError, DomainError
from ..game.intersection import GameGeometry
from ..models.autodiff_net import ActivationKind
from ..solvers.bvp import BvpConfig
from ..solvers.rollout import RolloutConfig
from ..training.hybrid import HybridConfig
from ..training.losses import LossWeights
from ..training.trainer import DESK_THETA_SET, FULL_THETA_SET, TrainConfig
from .file_ops import load_yaml
from .validator import ConfigValidator, collect_domain_errors, suggest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OperatorSection:
    hidden_widths: Tuple[int, ...] = (64, 64, 64)
    basis_count: int = 64
    activation: str = "tanh"
    adaptive_activation: bool = False
    omega0: float = 30.0
    lattice_resolution: Tuple[int, ...] = (31, 31)
    lattice_mode: str = "position"
    sign_convention: str = "maximizing"
    value_scale: float = 100.0
    costate_scale: float = 10.0

    def validation_errors(self) -> List[str]:
        errors = []
        if not self.hidden_widths or any(w <= 0 for w in self.hidden_widths):
            errors.append("hidden_widths must be a nonempty list of positive widths")
        if self.basis_count <= 0:
            errors.append("basis_count must be positive")
        if self.activation not in ("tanh", "sine", "relu"):
            errors.append(f"activation must be tanh, sine or relu, got '{self.activation}'")
        if self.lattice_mode not in ("position", "full"):
            errors.append(f"lattice_mode must be 'position' or 'full', got '{self.lattice_mode}'")
        elif len(self.lattice_resolution) != (2 if self.lattice_mode == "position" else 4):
            errors.append(f"lattice_resolution needs one entry per {self.lattice_mode} lattice axis")
        if self.sign_convention not in ("maximizing", "printed"):
            errors.append(f"sign_convention must be 'maximizing' or 'printed', got '{self.sign_convention}'")
        if self.value_scale <= 0 or self.costate_scale <= 0:
            errors.append("value_scale and costate_scale must be positive")
        return errors

    def activation_kind(self) -> ActivationKind:
        return ActivationKind(self.activation, self.adaptive_activation, self.omega0)


@dataclass(frozen=True)
class BvpSection:
    count: int = 1000
    d_bounds: Tuple[float, float] = (15.0, 20.0)
    v_bounds: Tuple[float, float] = (18.0, 25.0)
    theta_set: Tuple[Tuple[int, int], ...] = FULL_THETA_SET
    rtol: float = 1e-10
    atol: float = 1e-12
    tolerance: float = 1e-6
    max_newton_iters: int = 50
    max_backtracks: int = 30
    fd_step: float = 1e-6
    restarts: int = 5
    restart_scale: float = 0.5
    continuation_levels: int = 8
    exhaustive: bool = False

    def validation_errors(self) -> List[str]:
        errors = []
        if self.count <= 0:
            errors.append("count must be positive")
        if self.rtol <= 0 or self.atol <= 0 or self.tolerance <= 0:
            errors.append("tolerances must be positive")
        if self.continuation_levels < 1:
            errors.append("continuation_levels must be at least 1")
        if self.restarts < 0:
            errors.append("restarts must be nonnegative")
        if not self.theta_set:
            errors.append("theta_set must not be empty")
        return errors

    def solver(self, seed: int) -> BvpConfig:
        names = {f.name for f in fields(BvpConfig)} - {"seed"}
        return BvpConfig(seed=seed, **{name: getattr(self, name) for name in names})


@dataclass(frozen=True)
class EvaluatorSection:
    count: int = 600
    d_bounds: Tuple[float, float] = (15.0, 20.0)
    v_bounds: Tuple[float, float] = (18.0, 25.0)
    variant: str = "with-inevitable"
    #: Empty means all 25 pairs.
    theta_pairs: Tuple[Tuple[int, int], ...] = ()
    pno_policy: str = "pno-costate"
    dt: float = 0.1
    rtol: float = 1e-9
    atol: float = 1e-11
    collision_substeps: int = 100
    collision_tolerance: float = 1e-3
    slice_speed: float = 18.0
    slice_time: float = 0.0
    slice_resolution: int = 61
    export_thetas: Tuple[int, int] = (1, 1)
    export_player: int = 1
    top_basis: int = 4
    bvp_grid_resolution: int = 0

    def validation_errors(self) -> List[str]:
        errors = []
        if self.count <= 0:
            errors.append("count must be positive")
        if self.variant not in ("with-inevitable", "without-inevitable", "census"):
            errors.append(f"variant must be with-inevitable, without-inevitable or census, got '{self.variant}'")
        if self.pno_policy not in ("pno-costate", "pno-value-gradient"):
            errors.append(f"pno_policy must be 'pno-costate' or 'pno-value-gradient', got '{self.pno_policy}'")
        if self.dt <= 0:
            errors.append("dt must be positive")
        if self.collision_substeps < 1 or self.collision_tolerance <= 0:
            errors.append("collision scan settings must be positive")
        if self.export_player not in (1, 2):
            errors.append("export_player must be 1 or 2")
        if self.slice_resolution < 2:
            errors.append("slice_resolution must be at least 2")
        return errors


@dataclass(frozen=True)
class IoSection:
    output_dir: str = "runs"
    checkpoint: str = "pno.ckpt"
    hybrid_checkpoint: str = "hybrid.ckpt"
    dataset: str = "bvp_dataset.csv"
    manifest: str = "bvp_manifest.yaml"
    metrics: str = "metrics.csv"
    hybrid_metrics: str = "hybrid_metrics.csv"
    safety_table: str = "safety_table.csv"
    value_grid: str = "value_grid.csv"
    basis_ranking: str = "basis_ranking.csv"
    keep_backups: bool = True


SECTIONS: Dict[str, type] = {
    "game": GameGeometry,
    "operator": OperatorSection,
    "rollout": RolloutConfig,
    "trainer": TrainConfig,
    "trainer.loss_weights": LossWeights,
    "trainer.hybrid": HybridConfig,
    "bvp": BvpSection,
    "evaluator": EvaluatorSection,
    "io": IoSection,
}

TOP_LEVEL: Dict[str, Any] = {"profile": "desk", "seed": 0, "deterministic": False, "jobs": 1}

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {
        "trainer": {
            "pretrain_iters": 2000,
            "train_iters": 30,
            "gradient_steps": 100,
            "rollout_count": 64,
            "residual_points": 256,
            "boundary_points": 256,
            "learning_rate": 1e-3,
            "theta_training_set": [list(p) for p in DESK_THETA_SET],
            "hybrid": {"stage1_iters": 2000, "stage2_iters": 1000, "learning_rate": 1e-3},
        },
        "bvp": {"count": 64, "theta_set": [list(p) for p in DESK_THETA_SET]},
        "evaluator": {"count": 50},
    },
    "full": {
        "trainer": {
            "pretrain_iters": 50000,
            "train_iters": 300,
            "gradient_steps": 3000,
            "rollout_count": 1000,
            "residual_points": 1000,
            "boundary_points": 1000,
            "learning_rate": 2e-5,
            "theta_training_set": [list(p) for p in FULL_THETA_SET],
            "hybrid": {"stage1_iters": 100000, "stage2_iters": 30000, "learning_rate": 2e-5},
        },
        "bvp": {"count": 1000, "theta_set": [list(p) for p in FULL_THETA_SET]},
        "evaluator": {"count": 600},
    },
}

COMMENTS: Dict[str, str] = {
    "profile": "desk (minutes on a laptop CPU) or full (long server runs)",
    "seed": "root seed; every random draw derives from it",
    "deterministic": "torch deterministic algorithms, one intra-op thread",
    "jobs": "worker threads for rollouts, BVP solves and simulations",
    "game.R": "distance from the start line to the intersection [m]",
    "game.L": "vehicle length [m]",
    "game.W": "vehicle width [m]; theta scales it in the collision zone",
    "game.gamma": "sharpness of the sigmoid collision penalty",
    "game.b": "collision penalty magnitude",
    "game.u_min": "lower acceleration bound [m/s^2]",
    "game.u_max": "upper acceleration bound [m/s^2]",
    "game.v_bar": "reference speed in the terminal loss [m/s]",
    "game.mu": "weight rewarding terminal progress",
    "game.T": "horizon [s]",
    "operator.basis_count": "number q of branch coefficients and trunk basis functions",
    "operator.lattice_resolution": "constraint lattice nodes per axis",
    "operator.sign_convention": "maximizing (value = -cost) or printed (boundary residual value - g)",
    "operator.value_scale": "values are value_scale * sum_k b_k t_k",
    "operator.costate_scale": "costates are costate_scale * sum_k b_k t_k",
    "rollout.dt_grid": "output grid step of rollouts and trajectories [s]",
    "rollout.terminal_from_g": "start backward costates from -grad g instead of the costate net",
    "trainer.resample_period": "iterations between rollout refreshes and window growth",
    "trainer.d_bounds": "training box positions [m]",
    "trainer.v_bounds": "training box speeds [m/s]",
    "trainer.loss_reduction": "sum or mean over each loss term's samples",
    "bvp.d_bounds": "initial positions of BVP cases [m]",
    "bvp.v_bounds": "initial speeds of BVP cases [m/s]",
    "bvp.continuation_levels": "penalty levels 0, b/1e6 ... b solved in turn",
    "bvp.exhaustive": "solve every restart and keep the equilibrium with the largest value sum",
    "evaluator.variant": "with-inevitable, without-inevitable or census",
    "evaluator.theta_pairs": "empty for all 25 pairs",
    "evaluator.bvp_grid_resolution": "nodes per axis of the BVP value grid export; 0 skips it",
}


def _plain(value: Any) -> Any:
    """Tuples to lists, recursively, for YAML dumping and hashing."""
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(_coerce(v, default[0] if default else None) for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    return value


def _build(cls: type, values: Mapping[str, Any]) -> Any:
    defaults = {f.name: f.default for f in fields(cls)}
    kwargs = {key: _coerce(value, defaults[key]) for key, value in values.items() if key in defaults}
    return cls(**kwargs)


def deep_merge(base: Mapping[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


@dataclass(frozen=True)
class RunConfig:
    game: GameGeometry = field(default_factory=GameGeometry)
    operator: OperatorSection = field(default_factory=OperatorSection)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    bvp: BvpSection = field(default_factory=BvpSection)
    evaluator: EvaluatorSection = field(default_factory=EvaluatorSection)
    io: IoSection = field(default_factory=IoSection)
    profile: str = "desk"
    seed: int = 0
    deterministic: bool = False
    jobs: int = 1

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]] = None, profile: Optional[str] = None) -> "RunConfig":
        """Validate ``data`` and build the configuration.

        The profile overlay (``profile`` argument, else ``data["profile"]``,
        else desk) is applied first and the keys in ``data`` on top of it.

        Raises:
            ConfigError: unknown keys, wrong types or out-of-range values.
        """
        validator = ConfigValidator(SECTIONS, TOP_LEVEL)
        is_valid, errors, warnings = validator.validate_config(data)
        if not is_valid:
            raise ConfigError("Invalid configuration", errors)
        for warning in warnings:
            logger.warning(warning)
        data = dict(data or {})
        name = profile or data.get("profile", TOP_LEVEL["profile"])
        if name not in PROFILES:
            raise ConfigError("Invalid configuration", [f"Unknown profile '{name}'{_profile_hint(name)}"])
        merged = deep_merge(PROFILES[name], data)
        merged["profile"] = name

        trainer = dict(merged.get("trainer") or {})
        sections = {
            "game": _build(GameGeometry, merged.get("game") or {}),
            "operator": _build(OperatorSection, merged.get("operator") or {}),
            "rollout": _build(RolloutConfig, merged.get("rollout") or {}),
            "loss_weights": _build(LossWeights, trainer.pop("loss_weights", None) or {}),
            "hybrid": _build(HybridConfig, trainer.pop("hybrid", None) or {}),
            "trainer": _build(TrainConfig, trainer),
            "bvp": _build(BvpSection, merged.get("bvp") or {}),
            "evaluator": _build(EvaluatorSection, merged.get("evaluator") or {}),
            "io": _build(IoSection, merged.get("io") or {}),
        }
        top = {key: merged.get(key, default) for key, default in TOP_LEVEL.items()}
        config = cls(**sections, **top)
        config.check()
        return config

    def validation_errors(self) -> List[str]:
        errors = collect_domain_errors({
            "game": self.game, "operator": self.operator, "rollout": self.rollout,
            "trainer": self.trainer, "trainer.loss_weights": self.loss_weights,
            "trainer.hybrid": self.hybrid, "bvp": self.bvp, "evaluator": self.evaluator,
        })
        if self.jobs < 1:
            errors.append("jobs must be at least 1")
        if self.seed < 0:
            errors.append("seed must be nonnegative")
        for name, step in (("rollout.dt_grid", self.rollout.dt_grid), ("evaluator.dt", self.evaluator.dt)):
            try:
                replace(self.rollout, dt_grid=step).time_grid(0.0, self.game.T)
            except DomainError:
                errors.append(f"{name} ({step}) must divide the horizon T={self.game.T}")
        return errors

    def warnings(self) -> List[str]:
        notes = []
        if self.trainer.train_iters % self.trainer.resample_period:
            notes.append("trainer.train_iters is not a multiple of trainer.resample_period")
        if self.game.b == 0:
            notes.append("game.b = 0 disables the collision penalty")
        return notes

    def check(self) -> "RunConfig":
        errors = self.validation_errors()
        if errors:
            raise ConfigError("Invalid configuration", errors)
        for note in self.warnings():
            logger.warning(note)
        return self

    def to_dict(self) -> Dict[str, Any]:
        trainer = _plain(asdict(self.trainer))
        trainer["loss_weights"] = _plain(asdict(self.loss_weights))
        trainer["hybrid"] = _plain(asdict(self.hybrid))
        return {
            "profile": self.profile,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "jobs": self.jobs,
            "game": _plain(asdict(self.game)),
            "operator": _plain(asdict(self.operator)),
            "rollout": _plain(asdict(self.rollout)),
            "trainer": trainer,
            "bvp": _plain(asdict(self.bvp)),
            "evaluator": _plain(asdict(self.evaluator)),
            "io": _plain(asdict(self.io)),
        }

    def config_hash(self) -> str:
        """First 16 hex digits of SHA-256 over the sorted-key YAML dump.

        ``jobs`` is left out: it changes scheduling, not results.
        """
        data = self.to_dict()
        data.pop("jobs")
        text = yaml.safe_dump(data, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Replace top-level keys (seed, jobs, deterministic); None leaves a key unchanged."""
        changes = {key: value for key, value in overrides.items() if value is not None}
        return replace(self, **changes).check() if changes else self

    def provenance(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "profile": self.profile,
            "geometry": self.game.describe(),
            "geometry_hash": self.game.geometry_hash(),
        }


def _profile_hint(name: str) -> str:
    return suggest(name, PROFILES)


def load_config(path: Optional[str] = None, profile: Optional[str] = None) -> RunConfig:
    """Load a YAML run configuration; no path means all defaults."""
    if path is None:
        return RunConfig.from_dict({}, profile)
    try:
        data = load_yaml(Path(path))
    except yaml.YAMLError as exc:
        raise ConfigError(f"Malformed YAML in {path}", [str(exc)]) from exc
    except FileNotFoundError as exc:
        raise ConfigError(str(exc), [str(exc)]) from exc
    return RunConfig.from_dict(data, profile)


def _scalar(value: Any) -> str:
    return yaml.safe_dump([_plain(value)], default_flow_style=True, width=1000).strip()[1:-1]


def render_default_config(profile: str = "desk") -> str:
    """Fully populated YAML for ``profile`` with a comment on each documented key."""
    data = RunConfig.from_dict({}, profile).to_dict()
    lines = ["# Run configuration. Every key is optional; omitted keys take these values.", ""]

    def emit(prefix: str, mapping: Mapping[str, Any], indent: int) -> None:
        pad = " " * indent
        for key, value in mapping.items():
            path = f"{prefix}.{key}" if prefix else key
            comment = COMMENTS.get(path)
            if isinstance(value, dict):
                lines.append(f"{pad}{key}:")
                emit(path, value, indent + 2)
                continue
            text = f"{pad}{key}: {_scalar(value)}"
            lines.append(f"{text}  # {comment}" if comment else text)

    emit("", data, 0)
    return "\n".join(lines) + "\n"
