"""
Pipeline coordinator.
Wires the run configuration, the artifact directory and the domain modules
behind each CLI command.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .evaluation.export import (
    RANKING_COLUMNS,
    ValueSlice,
    basis_ranking,
    bvp_value_grid,
    difference_field,
    export_value_grid,
    write_basis_svg,
    write_contour_svg,
    write_loss_svg,
)
from .evaluation.safety import SAFETY_COLUMNS, MethodSpec, SafetyReport, Variant, safety_table, sample_test_cases
from .evaluation.simulate import PolicyKind, SimConfig
from .exceptions import CheckpointMismatchError, PnoError
from .game.intersection import IntersectionGame
from .models.checkpoint import load_checkpoint, save_checkpoint
from .models.operator import LatticeSpec, Normalizer, OperatorEnsemble
from .solvers.bvp import DatasetReport, SupervisedDataset, generate_dataset
from .solvers.rollout import TRAJECTORY_COLUMNS, bundle_rows
from .training.hybrid import train_hybrid
from .training.losses import TERM_NAMES
from .training.trainer import METRIC_COLUMNS, TrainResult, train_pno
from .utils.config import RunConfig
from .utils.file_ops import ArtifactManager
from .utils.seeding import seed_everything

logger = logging.getLogger(__name__)

HYBRID_METRIC_COLUMNS = (*METRIC_COLUMNS, "loss_supervised")


@dataclass
class TrainingOutcome:
    checkpoint: Path
    metrics: Path
    chart: Path
    result: TrainResult


@dataclass
class DatasetOutcome:
    dataset: Path
    manifest: Path
    report: DatasetReport


@dataclass
class EvaluationOutcome:
    table: Path
    report: SafetyReport


@dataclass
class ExportOutcome:
    files: List[Path] = field(default_factory=list)
    ranking: List[Dict[str, float]] = field(default_factory=list)


def build_ensemble(config: RunConfig, game: IntersectionGame, with_costate: bool = True) -> OperatorEnsemble:
    """Untrained operator ensemble with the configured lattice, widths and seed."""
    op = config.operator
    trainer = config.trainer
    lattice = LatticeSpec(trainer.d_bounds, trainer.v_bounds, op.lattice_resolution, op.lattice_mode)
    normalizer = Normalizer.from_box(trainer.d_bounds, trainer.v_bounds, game.horizon, op.value_scale, op.costate_scale)
    return OperatorEnsemble.initialize(
        game, lattice, normalizer,
        hidden_widths=op.hidden_widths,
        basis_count=op.basis_count,
        activation=op.activation_kind(),
        seed=config.seed,
        with_costate=with_costate,
        sign_convention=op.sign_convention,
    )


def build_sim_config(config: RunConfig) -> SimConfig:
    ev = config.evaluator
    return SimConfig(
        rtol=ev.rtol, atol=ev.atol,
        d_bounds=config.rollout.d_bounds, v_bounds=config.rollout.v_bounds,
        collision_substeps=ev.collision_substeps, collision_tolerance=ev.collision_tolerance,
    )


def parse_thetas(text: str) -> Tuple[int, int]:
    """``"1,5"`` -> (1, 5)."""
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise PnoError(f"Invalid theta pair '{text}' (expected two integers like 1,5)")
    return int(parts[0]), int(parts[1])


def parse_method(text: str) -> Tuple[str, str]:
    """``"LABEL=PATH"`` -> (label, path)."""
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise PnoError(f"Invalid method '{text}' (expected LABEL=PATH)")
    return label, path


class PnoPipeline:
    """Runs the commands of one configured run inside its output directory."""

    def __init__(self, config: RunConfig, manager: Optional[ArtifactManager] = None):
        self.config = config
        self.game = IntersectionGame(config.game)
        self.rng = seed_everything(config.seed, config.deterministic)
        self.manager = manager or ArtifactManager(
            config.io.output_dir, config.provenance(), config.io.keep_backups
        )

    # building blocks -----------------------------------------------------

    def new_ensemble(self, with_costate: bool = True) -> OperatorEnsemble:
        return build_ensemble(self.config, self.game, with_costate)

    def load_ensemble(self, path: str) -> OperatorEnsemble:
        return load_checkpoint(self.manager.path(path), self.config.game)

    def sim_config(self) -> SimConfig:
        return build_sim_config(self.config)

    def _write_metrics(self, name: str, columns: Sequence[str], result: TrainResult) -> Tuple[Path, Path]:
        metrics = self.manager.write_csv(name, columns, result.metrics)
        chart = self.manager.path(Path(name).with_suffix(".svg").name)
        keys = ["loss_total", *(f"loss_{term}" for term in TERM_NAMES)]
        if result.metrics:
            keys = [key for key in keys if any(row.get(key, 0.0) > 0.0 for row in result.metrics)] or ["loss_total"]
            write_loss_svg(result.metrics, chart, keys)
        return metrics, chart

    # commands ------------------------------------------------------------

    def train_pno(self) -> TrainingOutcome:
        cfg = self.config
        ens = self.new_ensemble(with_costate=True)
        logger.info(
            "Training PNO: %d parameters, profile %s, config %s",
            ens.flat_parameters().size, cfg.profile, cfg.config_hash(),
        )
        result = train_pno(ens, cfg.trainer, cfg.loss_weights, cfg.rollout, cfg.seed, cfg.jobs)
        checkpoint = save_checkpoint(result.ensemble, cfg.io.checkpoint, cfg.config_hash(), self.manager)
        metrics, chart = self._write_metrics(cfg.io.metrics, METRIC_COLUMNS, result)
        return TrainingOutcome(checkpoint, metrics, chart, result)

    def load_dataset(self) -> SupervisedDataset:
        """The BVP dataset CSV, checked against this run's geometry.

        Raises:
            CheckpointMismatchError: the dataset was generated for another geometry.
        """
        header, rows = self.manager.read_csv(self.config.io.dataset)
        expected = self.config.game.geometry_hash()
        found = header.get("geometry_hash")
        if found is not None and found != expected:
            raise CheckpointMismatchError(
                f"Dataset {self.config.io.dataset} was generated for geometry {found}, run uses {expected}"
            )
        dataset = SupervisedDataset.from_rows(rows, self.game)
        logger.info("Loaded %d dataset records from %s", len(dataset), self.config.io.dataset)
        return dataset

    def train_hybrid(self) -> TrainingOutcome:
        cfg = self.config
        try:
            dataset = self.load_dataset()
        except FileNotFoundError as exc:
            raise PnoError(f"{exc} (run gen-bvp first)") from exc
        if not len(dataset):
            raise PnoError(f"Dataset {cfg.io.dataset} holds no converged trajectories")
        ens = self.new_ensemble(with_costate=False)
        result = train_hybrid(ens, dataset, cfg.trainer, cfg.hybrid, cfg.loss_weights, cfg.seed)
        checkpoint = save_checkpoint(result.ensemble, cfg.io.hybrid_checkpoint, cfg.config_hash(), self.manager)
        metrics, chart = self._write_metrics(cfg.io.hybrid_metrics, HYBRID_METRIC_COLUMNS, result)
        return TrainingOutcome(checkpoint, metrics, chart, result)

    def gen_bvp(self, count: Optional[int] = None, thetas: Optional[Tuple[int, int]] = None) -> DatasetOutcome:
        cfg = self.config
        bvp = cfg.bvp
        theta_set = [thetas] if thetas else [tuple(p) for p in bvp.theta_set]
        dataset, report, solutions = generate_dataset(
            self.game, count or bvp.count, theta_set, cfg.seed,
            bvp.d_bounds, bvp.v_bounds, bvp.solver(cfg.seed), cfg.rollout, cfg.jobs,
        )
        rows: List[Dict[str, Any]] = []
        for bundle in dataset.bundles:
            rows.extend(bundle_rows(bundle, self.game))
        path = self.manager.write_csv(cfg.io.dataset, TRAJECTORY_COLUMNS, rows)
        cases = [
            {
                "case_id": int(s.bundle.case_id),
                "x0": [float(x) for x in s.bundle.states[0]],
                "thetas": [int(t) for t in s.bundle.thetas],
                "converged": bool(s.converged),
                "residual": float(s.residual_norm),
                "multiplicity": int(s.multiplicity),
            }
            for s in solutions
        ]
        manifest = self.manager.write_yaml(cfg.io.manifest, report.manifest(cases))
        return DatasetOutcome(path, manifest, report)

    def method_specs(self, methods: Sequence[Tuple[str, str]]) -> List[MethodSpec]:
        """Ground truth followed by one column per (label, checkpoint path).

        Checkpoints with costate nets run the configured PNO policy; value-only
        checkpoints run the hybrid value-gradient policy.
        """
        specs = [MethodSpec.ground_truth()]
        for label, path in methods:
            ens = self.load_ensemble(path)
            kind = PolicyKind(self.config.evaluator.pno_policy) if ens.has_costate else PolicyKind.HYBRID
            specs.append(MethodSpec(label, kind, ens))
        return specs

    def evaluate(
        self,
        methods: Sequence[Tuple[str, str]],
        variant: Optional[str] = None,
        count: Optional[int] = None,
        thetas: Optional[Tuple[int, int]] = None,
    ) -> EvaluationOutcome:
        cfg = self.config
        ev = cfg.evaluator
        variant = Variant(variant or ev.variant)
        specs = self.method_specs(methods)
        states = sample_test_cases(cfg.seed, count or ev.count, ev.d_bounds, ev.v_bounds)
        pairs = [thetas] if thetas else ([tuple(p) for p in ev.theta_pairs] or None)
        report = safety_table(
            states, specs, variant, self.game, cfg.seed, pairs,
            cfg.bvp.solver(cfg.seed), replace(cfg.rollout, dt_grid=ev.dt), self.sim_config(), cfg.jobs,
        )
        extra = {
            "variant": variant.value,
            "case_count": report.case_count,
            "excluded_inevitable": report.excluded_inevitable,
            "reference_failures": report.reference_failures,
            "methods": ";".join(f"{label}={path}" for label, path in methods) or "GT",
        }
        table = self.manager.write_csv(cfg.io.safety_table, SAFETY_COLUMNS, report.rows(), extra)
        return EvaluationOutcome(table, report)

    def export(self, checkpoint: str, thetas: Optional[Tuple[int, int]] = None) -> ExportOutcome:
        cfg = self.config
        ev = cfg.evaluator
        ens = self.load_ensemble(checkpoint)
        pair = thetas or tuple(ev.export_thetas)
        normalizer = ens.normalizer
        value_slice = ValueSlice(
            ev.slice_speed, ev.slice_time, (normalizer.lower[0], normalizer.upper[0]), ev.slice_resolution
        )
        outcome = ExportOutcome()
        outcome.ranking = basis_ranking(ens, None, ev.export_player)
        top = [int(row["k"]) for row in outcome.ranking[: ev.top_basis]]
        rows = export_value_grid(ens, pair, value_slice, ev.export_player, top)
        extra = {"thetas": f"{pair[0]},{pair[1]}", "player": ev.export_player, "checkpoint": checkpoint}

        grid_columns = ("d1", "d2", "value", *(f"basis_{k}" for k in top))
        outcome.files.append(self.manager.write_csv(cfg.io.value_grid, grid_columns, rows, extra))
        outcome.files.append(self.manager.write_csv(cfg.io.basis_ranking, RANKING_COLUMNS, outcome.ranking, extra))
        outcome.files.append(write_contour_svg(
            rows, self.manager.path(Path(cfg.io.value_grid).with_suffix(".svg").name),
            f"Player {ev.export_player} value, thetas={pair}",
        ))
        if top:
            outcome.files.append(write_basis_svg(rows, top, self.manager.path("basis_fields.svg")))

        if ev.bvp_grid_resolution > 0:
            coarse = replace(value_slice, resolution=ev.bvp_grid_resolution)
            reference = bvp_value_grid(
                self.game, pair, coarse, ev.export_player, cfg.bvp.solver(cfg.seed), cfg.rollout, cfg.jobs
            )
            operator_rows = export_value_grid(ens, pair, coarse, ev.export_player)
            difference = difference_field(reference, operator_rows)
            for name, data, title in (
                ("bvp_value_grid", reference, "BVP value"),
                ("value_difference", difference, "|BVP value - operator value|"),
            ):
                outcome.files.append(self.manager.write_csv(f"{name}.csv", ("d1", "d2", "value"), data, extra))
                if not np.isnan([row["value"] for row in data]).any():
                    outcome.files.append(write_contour_svg(data, self.manager.path(f"{name}.svg"), title))
                else:
                    logger.warning("%s has unconverged nodes; contour plot skipped", name)
        return outcome
