"""
Tests for the artifact manager and checkpoint selection.
"""
import pytest

from pno_game.exceptions import CheckpointError
from pno_game.ui.prompts import select_checkpoint
from pno_game.utils.file_ops import ArtifactManager, format_csv, parse_csv


@pytest.fixture
def manager(output_dir):
    return ArtifactManager(str(output_dir), {"config_hash": "abc123", "seed": 0})


def test_csv_carries_provenance(manager):
    path = manager.write_csv("table.csv", ("a", "b"), [{"a": 1, "b": 2.5, "ignored": 0}], {"variant": "census"})
    header, rows = manager.read_csv(path.name)
    assert header == {"config_hash": "abc123", "seed": "0", "variant": "census"}
    assert rows == [{"a": "1", "b": "2.5"}]


def test_parse_csv_without_header_comments():
    header, rows = parse_csv(format_csv(("x",), [{"x": 3}]))
    assert header == {}
    assert rows == [{"x": "3"}]


def test_overwrite_keeps_backup(manager):
    manager.write_text("notes.txt", "first")
    manager.write_text("notes.txt", "second")
    assert manager.path("notes.txt").read_text() == "second"
    backups = manager.list_backups("notes")
    assert len(backups) == 1
    with open(backups[0]) as handle:
        assert handle.read() == "first"


def test_backups_can_be_disabled(output_dir):
    manager = ArtifactManager(str(output_dir), keep_backups=False)
    manager.write_text("notes.txt", "first")
    manager.write_text("notes.txt", "second")
    assert manager.list_backups("notes") == []


def test_yaml_manifest_has_provenance(manager):
    manager.write_yaml("manifest.yaml", {"requested": 2})
    loaded = manager.load_yaml("manifest.yaml")
    assert loaded["provenance"]["config_hash"] == "abc123"
    assert loaded["requested"] == 2


def test_missing_csv(manager):
    with pytest.raises(FileNotFoundError):
        manager.read_csv("absent.csv")


def test_list_checkpoints(manager):
    manager.write_bytes("a.ckpt", b"x")
    manager.write_text("b.csv", "y")
    assert [p.endswith("a.ckpt") for p in manager.list_checkpoints()] == [True]


def test_selection_needs_a_terminal():
    with pytest.raises(CheckpointError):
        select_checkpoint(["a.ckpt"], interactive=lambda: False)
