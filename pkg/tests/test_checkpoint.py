"""
Tests for checkpoint encoding, decoding and geometry checks.
"""
import numpy as np
import pytest

from pno_game.exceptions import CheckpointError, CheckpointMismatchError
from pno_game.game.intersection import GameGeometry
from pno_game.models.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_descriptor,
    save_checkpoint,
)


STATE = np.array([30.0, 20.0, 40.0, 18.0])


def test_round_trip_preserves_queries(ensemble):
    restored = decode_checkpoint(encode_checkpoint(ensemble, "abc123"))
    assert np.array_equal(restored.flat_parameters(), ensemble.flat_parameters())
    assert restored.basis_count == ensemble.basis_count
    assert restored.lattice == ensemble.lattice
    assert restored.value(STATE, 1.0, (2, 4)) == ensemble.value(STATE, 1.0, (2, 4))
    assert np.array_equal(
        restored.costate(STATE, 1.0, (2, 4), 2).as_array(), ensemble.costate(STATE, 1.0, (2, 4), 2).as_array()
    )


def test_encoding_is_deterministic(ensemble):
    assert encode_checkpoint(ensemble) == encode_checkpoint(ensemble)


def test_value_only_round_trip(value_only_ensemble):
    restored = decode_checkpoint(encode_checkpoint(value_only_ensemble))
    assert not restored.has_costate
    assert len(restored.parameter_blocks()) == 4


def test_descriptor_contents(ensemble, tmp_path):
    path = save_checkpoint(ensemble, tmp_path / "pno.ckpt", config_hash="feedbeef")
    descriptor = read_descriptor(path)
    assert descriptor["config_hash"] == "feedbeef"
    assert descriptor["geometry_hash"] == ensemble.game.geometry.geometry_hash()
    assert descriptor["total_parameters"] == ensemble.flat_parameters().size
    assert descriptor["blocks"][0]["name"] == "player1.value_branch"
    assert path.read_bytes().startswith(MAGIC)


def test_geometry_mismatch(ensemble, tmp_path):
    path = save_checkpoint(ensemble, tmp_path / "pno.ckpt")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, GameGeometry(b=0.0))
    assert load_checkpoint(path, GameGeometry()).basis_count == ensemble.basis_count


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_bad_header_and_truncated_payload(ensemble):
    data = encode_checkpoint(ensemble)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOT-A-CKPT\n" + data[len(MAGIC):])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-8])
