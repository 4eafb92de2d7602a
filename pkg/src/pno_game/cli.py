"""
Command-line interface: ``pno-game <command>``.
"""
import functools
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple

import rich_click as click
from rich.console import Console

from .checks import run_checks
from .evaluation.safety import Variant
from .exceptions import ConfigError, PnoError
from .pipeline import PnoPipeline, parse_method, parse_thetas
from .ui.prompts import select_checkpoint
from .ui.renderer import UIRenderer
from .ui.theme import get_available_themes, set_theme
from .utils.config import PROFILES, RunConfig, load_config, render_default_config
from .utils.file_ops import atomic_write
from .utils.logging_setup import configure_logging

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def run_guarded(renderer: UIRenderer, action: Callable[[], Optional[int]]) -> int:
    """Run ``action`` and turn errors into rendered messages and exit codes."""
    try:
        return action() or EXIT_OK
    except ConfigError as exc:
        renderer.render_error_message(str(exc), exc.errors)
        return EXIT_USAGE
    except (PnoError, FileNotFoundError) as exc:
        renderer.render_error_message(str(exc))
        return EXIT_FAILURE
    except KeyboardInterrupt:
        renderer.render_warning_message("Interrupted")
        return EXIT_FAILURE
    except Exception as exc:
        renderer.render_error_message(f"Unexpected error: {type(exc).__name__}: {exc}")
        return EXIT_FAILURE


def run_options(func):
    """Options shared by every command that runs a configured pipeline."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run configuration YAML"),
        click.option("--profile", type=click.Choice(sorted(PROFILES)), help="Iteration and sample-count profile"),
        click.option("--seed", type=int, help="Root seed (overrides the config)"),
        click.option("--jobs", type=int, help="Worker threads"),
        click.option("--deterministic", is_flag=True, default=False, help="Deterministic torch kernels, one thread"),
        click.option("-v", "--verbose", is_flag=True, default=False, help="Debug logging"),
        click.option("-q", "--quiet", is_flag=True, default=False, help="Warnings and errors only"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_config(
    config_path: Optional[str], profile: Optional[str], seed: Optional[int], jobs: Optional[int],
    deterministic: bool, b: Optional[float] = None,
) -> RunConfig:
    config = load_config(config_path, profile)
    config = config.with_overrides(seed=seed, jobs=jobs, deterministic=True if deterministic else None)
    if b is not None:
        config = replace(config, game=replace(config.game, b=float(b))).check()
    return config


def pipeline_command(func):
    """Wrap a command body ``func(ctx, renderer, pipeline, **kwargs)`` with config loading and error handling."""
    @run_options
    @click.pass_context
    @functools.wraps(func)
    def wrapper(ctx, config_path, profile, seed, jobs, deterministic, verbose, quiet, **kwargs):
        renderer = UIRenderer(Console())
        configure_logging(1 if verbose else (-1 if quiet else 0))
        b = kwargs.pop("b", None)

        def action():
            config = build_config(config_path, profile, seed, jobs, deterministic, b)
            pipeline = PnoPipeline(config)
            return func(ctx, renderer, pipeline, **kwargs)

        ctx.exit(run_guarded(renderer, action))

    return wrapper


def _theta_option(help_text: str):
    return click.option("--theta", "theta", help=help_text)


def _thetas(text: Optional[str]) -> Optional[Tuple[int, int]]:
    return parse_thetas(text) if text else None


@click.group()
@click.option("--theme", type=click.Choice(get_available_themes()), default="default", help="Console colour theme")
def cli(theme):
    """Pontryagin neural operators for the two-vehicle intersection game."""
    set_theme(theme)


@cli.command("train-pno")
@pipeline_command
def train_pno_command(ctx, renderer: UIRenderer, pipeline: PnoPipeline):
    """Pretrain and train the PNO value and costate operators."""
    renderer.render_banner("train-pno", f"profile {pipeline.config.profile}, seed {pipeline.config.seed}")
    outcome = pipeline.train_pno()
    final = outcome.result.metrics[-1] if outcome.result.metrics else {}
    renderer.render_info_table(
        {
            "final_loss": final.get("loss_total", float("nan")),
            "mean_residual": final.get("mean_residual", float("nan")),
            "failed_rollouts": outcome.result.failed_rollouts,
            "config_hash": pipeline.config.config_hash(),
        },
        title="Training summary",
    )
    renderer.render_success_message(f"Checkpoint written to {outcome.checkpoint}")
    renderer.render_success_message(f"Metrics written to {outcome.metrics}")


@cli.command("train-hybrid")
@pipeline_command
def train_hybrid_command(ctx, renderer: UIRenderer, pipeline: PnoPipeline):
    """Fit value operators to the BVP dataset, then refine with physics losses."""
    renderer.render_banner("train-hybrid", f"dataset {pipeline.config.io.dataset}")
    outcome = pipeline.train_hybrid()
    renderer.render_success_message(f"Checkpoint written to {outcome.checkpoint}")
    renderer.render_success_message(f"Metrics written to {outcome.metrics}")


@cli.command("gen-bvp")
@click.option("--count", type=int, help="Number of initial states to solve")
@_theta_option("Solve every case for this theta pair, e.g. 1,5")
@click.option("--b", "b", type=float, help="Collision penalty magnitude (0 solves the penalty-free game)")
@pipeline_command
def gen_bvp_command(ctx, renderer: UIRenderer, pipeline: PnoPipeline, count: Optional[int], theta: Optional[str]):
    """Generate the BVP ground-truth dataset by shooting with continuation."""
    renderer.render_banner("gen-bvp", f"b={pipeline.config.game.b:g}")
    outcome = pipeline.gen_bvp(count, _thetas(theta))
    report = outcome.report
    renderer.render_info_table(
        {
            "requested": report.requested,
            "converged": report.converged,
            "convergence_rate": renderer.format_percentage(100.0 * report.convergence_rate),
            "multiplicity_events": report.multiplicity_events,
        },
        title="BVP dataset",
    )
    if report.failed_cases:
        renderer.render_warning_message(f"{len(report.failed_cases)} case(s) did not converge and were excluded")
    renderer.render_success_message(f"Dataset written to {outcome.dataset}")
    renderer.render_success_message(f"Manifest written to {outcome.manifest}")


@cli.command("evaluate")
@click.option("--method", "methods", multiple=True, help="LABEL=PATH of a checkpoint to compare (repeatable)")
@click.option("--checkpoint", help="Checkpoint to evaluate when no --method is given")
@click.option("--variant", type=click.Choice([v.value for v in Variant]), help="Safety table variant")
@click.option("--count", type=int, help="Number of test cases")
@_theta_option("Evaluate only this theta pair, e.g. 1,1")
@pipeline_command
def evaluate_command(
    ctx, renderer: UIRenderer, pipeline: PnoPipeline, methods: Sequence[str], checkpoint: Optional[str],
    variant: Optional[str], count: Optional[int], theta: Optional[str],
):
    """Closed-loop safety table of the given checkpoints against the BVP ground truth."""
    variant = variant or pipeline.config.evaluator.variant
    parsed = [parse_method(text) for text in methods]
    if not parsed and variant != Variant.CENSUS.value:
        path = checkpoint or select_checkpoint(pipeline.manager.list_checkpoints())
        parsed = [(Path(path).stem, path)]
    renderer.render_banner("evaluate", variant)
    outcome = pipeline.evaluate(parsed, variant, count, _thetas(theta))
    rows = outcome.report.rows()
    for method in outcome.report.methods:
        renderer.render_safety_grid(rows, method, variant)
    if outcome.report.excluded_inevitable:
        renderer.render_info_message(f"{outcome.report.excluded_inevitable} inevitable-collision case(s) excluded")
    renderer.render_success_message(f"Safety table written to {outcome.table}")


@cli.command("export")
@click.option("--checkpoint", help="Checkpoint whose value structure to export")
@_theta_option("Theta pair of the value slice, e.g. 1,1")
@pipeline_command
def export_command(ctx, renderer: UIRenderer, pipeline: PnoPipeline, checkpoint: Optional[str], theta: Optional[str]):
    """Value grid, trunk basis fields and basis ranking of a checkpoint."""
    path = checkpoint or select_checkpoint(pipeline.manager.list_checkpoints())
    renderer.render_banner("export", path)
    outcome = pipeline.export(path, _thetas(theta))
    renderer.render_table_with_data(
        outcome.ranking[: pipeline.config.evaluator.top_basis], title="Top basis functions"
    )
    for written in outcome.files:
        renderer.render_success_message(f"Wrote {written}")


@cli.command("check")
@click.option("--full", is_flag=True, default=False, help="Acceptance-scale sample counts, the pretraining gate and the end-to-end desk run")
@click.option("--only", "names", multiple=True, help="Run only the named check (repeatable)")
@click.option("--seed", type=int, default=0, help="Seed of the randomized checks")
@click.option("-v", "--verbose", is_flag=True, default=False, help="Debug logging")
@click.pass_context
def check_command(ctx, full: bool, names: Sequence[str], seed: int, verbose: bool):
    """Run the property and oracle suite."""
    renderer = UIRenderer(Console())
    configure_logging(1 if verbose else -1)

    def action():
        results = run_checks(full, seed, names)
        renderer.render_check_results(results)
        failed = [r.name for r in results if not r.passed]
        if failed:
            renderer.render_error_message(f"{len(failed)} check(s) failed", failed)
            return EXIT_FAILURE
        renderer.render_success_message(f"All {len(results)} checks passed")
        return EXIT_OK

    ctx.exit(run_guarded(renderer, action))


@cli.command("init-config")
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="desk", help="Profile to write out")
@click.option("--force", is_flag=True, default=False, help="Overwrite an existing file")
@click.pass_context
def init_config_command(ctx, path: str, profile: str, force: bool):
    """Write the fully populated default configuration."""
    renderer = UIRenderer(Console())

    def action():
        target = Path(path)
        if target.exists() and not force:
            raise PnoError(f"{target} already exists (use --force to overwrite)")
        atomic_write(target, render_default_config(profile).encode("utf-8"))
        renderer.render_success_message(f"Wrote {profile} configuration to {target}")

    ctx.exit(run_guarded(renderer, action))


def main():
    cli(prog_name="pno-game")


if __name__ == "__main__":
    main()
