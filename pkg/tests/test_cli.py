"""
Command-line tests through click's CliRunner.
"""
import pytest
import yaml
from click.testing import CliRunner

from pno_game.cli import EXIT_FAILURE, EXIT_USAGE, cli
from pno_game.models.checkpoint import save_checkpoint
from pno_game.utils.file_ops import parse_csv


@pytest.fixture
def runner():
    return CliRunner(env={"COLUMNS": "300"})


@pytest.fixture
def run_config(tmp_path, output_dir):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({
        "io": {"output_dir": str(output_dir)},
        "evaluator": {"slice_resolution": 3, "top_basis": 2},
    }))
    return str(path)


def test_init_config_writes_and_refuses_overwrite(runner, tmp_path):
    target = tmp_path / "pno.yaml"
    result = runner.invoke(cli, ["init-config", str(target)])
    assert result.exit_code == 0
    written = target.read_text()
    assert yaml.safe_load(written)["profile"] == "desk"

    result = runner.invoke(cli, ["init-config", str(target), "--profile", "full"])
    assert result.exit_code == EXIT_FAILURE
    assert "already exists" in result.output
    assert target.read_text() == written

    result = runner.invoke(cli, ["init-config", str(target), "--profile", "full", "--force"])
    assert result.exit_code == 0
    assert yaml.safe_load(target.read_text())["profile"] == "full"


def test_check_single(runner):
    result = runner.invoke(cli, ["check", "--only", "curriculum"])
    assert result.exit_code == 0
    assert "All 1 checks passed" in result.output


def test_check_unknown_name(runner):
    result = runner.invoke(cli, ["check", "--only", "nonsense"])
    assert result.exit_code == EXIT_FAILURE
    assert "Unknown check" in result.output


def test_bad_config_exits_with_usage_code(runner, tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("trainer:\n  lerning_rate: 0.1\n")
    result = runner.invoke(cli, ["train-pno", "--config", str(path)])
    assert result.exit_code == EXIT_USAGE
    assert "did you mean 'learning_rate'" in result.output


def test_evaluate_missing_checkpoint(runner, run_config, output_dir):
    result = runner.invoke(cli, ["evaluate", "--config", run_config, "--checkpoint", "missing.ckpt", "--count", "1"])
    assert result.exit_code == EXIT_FAILURE
    assert not (output_dir / "safety_table.csv").exists()


def test_evaluate_without_checkpoint_in_batch_mode(runner, run_config):
    result = runner.invoke(cli, ["evaluate", "--config", run_config, "--count", "1"])
    assert result.exit_code == EXIT_FAILURE
    assert "--checkpoint" in result.output


def test_gen_bvp_penalty_free(runner, run_config, output_dir):
    result = runner.invoke(cli, ["gen-bvp", "--config", run_config, "--b", "0", "--count", "1", "--theta", "1,5"])
    assert result.exit_code == 0, result.output
    provenance, rows = parse_csv((output_dir / "bvp_dataset.csv").read_text())
    assert "b=0" in provenance["geometry"]
    assert len(rows) == 31
    assert {row["theta1"] + row["theta2"] for row in rows} == {"15"}
    manifest = yaml.safe_load((output_dir / "bvp_manifest.yaml").read_text())
    assert manifest["converged"] == 1


def test_invalid_theta_pair(runner, run_config):
    result = runner.invoke(cli, ["gen-bvp", "--config", run_config, "--b", "0", "--count", "1", "--theta", "1;5"])
    assert result.exit_code == EXIT_FAILURE
    assert "Invalid theta pair" in result.output


def test_export_writes_artifacts(runner, run_config, output_dir, ensemble):
    checkpoint = save_checkpoint(ensemble, str(output_dir / "tiny.ckpt"), "test")
    result = runner.invoke(cli, ["export", "--config", run_config, "--checkpoint", str(checkpoint), "--theta", "2,3"])
    assert result.exit_code == 0, result.output
    provenance, rows = parse_csv((output_dir / "value_grid.csv").read_text())
    assert provenance["thetas"] == "2,3"
    assert len(rows) == 9
    assert sum(key.startswith("basis_") for key in rows[0]) == 2
    assert (output_dir / "value_grid.svg").exists()
    assert (output_dir / "basis_ranking.csv").exists()
