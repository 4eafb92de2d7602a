"""
Checkpoint files.

Layout::

    PNO-CKPT v1\\n
    <YAML descriptor, ended by the YAML end marker line "...">
    <parameter blocks, little-endian IEEE-754 float64>

Blocks follow ``OperatorEnsemble.parameter_blocks`` order (player 1 value
branch, value trunk, costate branch, costate trunk, then player 2); the
descriptor lists each block's name, shape, offset and entry count.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml

from ..exceptions import CheckpointError, CheckpointMismatchError
from ..game.intersection import GameGeometry, IntersectionGame
from ..utils.file_ops import atomic_write
from .autodiff_net import ActivationKind, NetworkShape, ParameterSet
from .operator import NET_NAMES, LatticeSpec, Normalizer, OperatorEnsemble, PlayerNets

logger = logging.getLogger(__name__)

MAGIC = b"PNO-CKPT v1\n"
END_MARKER = b"\n...\n"
BLOCK_DTYPE = np.dtype("<f8")


def describe(ens: OperatorEnsemble, config_hash: Optional[str] = None) -> Dict[str, Any]:
    blocks = []
    offset = 0
    for name, params in ens.parameter_blocks():
        blocks.append({
            "name": name,
            "input_dim": int(params.shape.input_dim),
            "hidden_widths": [int(w) for w in params.shape.hidden_widths],
            "output_dim": int(params.shape.output_dim),
            "offset": offset,
            "count": len(params),
        })
        offset += len(params)
    activation = ens.activation
    lattice = ens.lattice
    normalizer = ens.normalizer
    descriptor = {
        "basis_count": int(ens.basis_count),
        "activation": {
            "kind": activation.kind.value,
            "adaptive": bool(activation.adaptive),
            "omega0": float(activation.omega0),
        },
        "lattice": {
            "d_bounds": list(lattice.d_bounds),
            "v_bounds": list(lattice.v_bounds),
            "resolution": list(lattice.resolution),
            "mode": lattice.mode,
        },
        "normalizer": {
            "lower": list(normalizer.lower),
            "upper": list(normalizer.upper),
            "value_scale": float(normalizer.value_scale),
            "costate_scale": float(normalizer.costate_scale),
        },
        "geometry": ens.game.geometry.to_dict(),
        "geometry_hash": ens.game.geometry.geometry_hash(),
        "sign_convention": ens.sign_convention,
        "seed": int(ens.seed),
        "has_costate": bool(ens.has_costate),
        "byte_order": "little",
        "dtype": "float64",
        "total_parameters": offset,
        "blocks": blocks,
    }
    if config_hash is not None:
        descriptor["config_hash"] = config_hash
    return descriptor


def encode_checkpoint(ens: OperatorEnsemble, config_hash: Optional[str] = None) -> bytes:
    text = yaml.safe_dump(describe(ens, config_hash), sort_keys=False, explicit_end=True)
    payload = np.ascontiguousarray(ens.flat_parameters(), dtype=BLOCK_DTYPE).tobytes()
    return MAGIC + text.encode("utf-8") + payload


def _split(data: bytes) -> Tuple[Dict[str, Any], bytes]:
    if not data.startswith(MAGIC):
        raise CheckpointError("Not a PNO checkpoint (bad header line)")
    end = data.find(END_MARKER, len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError("Checkpoint descriptor is not terminated")
    try:
        descriptor = yaml.safe_load(data[len(MAGIC): end + 1].decode("utf-8"))
    except yaml.YAMLError as exc:
        raise CheckpointError(f"Malformed checkpoint descriptor: {exc}") from exc
    if not isinstance(descriptor, dict):
        raise CheckpointError("Checkpoint descriptor must be a mapping")
    return descriptor, data[end + len(END_MARKER):]


def decode_checkpoint(data: bytes, expected_geometry: Optional[GameGeometry] = None) -> OperatorEnsemble:
    """Rebuild an ensemble from checkpoint bytes.

    Raises:
        CheckpointError: malformed header, descriptor or payload.
        CheckpointMismatchError: the stored geometry hash differs from
            ``expected_geometry`` (or from the stored geometry itself).
    """
    descriptor, payload = _split(data)
    try:
        geometry = GameGeometry(**descriptor["geometry"])
        activation = ActivationKind(**descriptor["activation"])
        lattice = LatticeSpec(**descriptor["lattice"])
        normalizer = Normalizer(**descriptor["normalizer"])
        blocks = descriptor["blocks"]
        total = int(descriptor["total_parameters"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"Incomplete checkpoint descriptor: {exc}") from exc

    if geometry.geometry_hash() != descriptor.get("geometry_hash"):
        raise CheckpointMismatchError("Stored geometry does not match its recorded hash")
    if expected_geometry is not None and expected_geometry.geometry_hash() != geometry.geometry_hash():
        raise CheckpointMismatchError(
            f"Checkpoint geometry {geometry.geometry_hash()} does not match "
            f"configured geometry {expected_geometry.geometry_hash()}"
        )
    if len(payload) != total * BLOCK_DTYPE.itemsize:
        raise CheckpointError(
            f"Parameter payload has {len(payload)} bytes, descriptor needs {total * BLOCK_DTYPE.itemsize}"
        )
    flat = np.frombuffer(payload, dtype=BLOCK_DTYPE).astype(np.float64)

    nets: Dict[int, Dict[str, ParameterSet]] = {1: {}, 2: {}}
    for block in blocks:
        player_name, _, net_name = block["name"].partition(".")
        if player_name not in ("player1", "player2") or net_name not in NET_NAMES:
            raise CheckpointError(f"Unknown parameter block '{block['name']}'")
        shape = NetworkShape(block["input_dim"], tuple(block["hidden_widths"]), block["output_dim"])
        values = flat[block["offset"]: block["offset"] + block["count"]]
        nets[int(player_name[-1])][net_name] = ParameterSet(values, shape, activation)

    players = tuple(PlayerNets(**nets[player]) for player in (1, 2))
    return OperatorEnsemble(
        players,
        int(descriptor["basis_count"]),
        lattice,
        normalizer,
        IntersectionGame(geometry),
        descriptor.get("sign_convention", "maximizing"),
        int(descriptor.get("seed", 0)),
    )


def save_checkpoint(ens: OperatorEnsemble, path: Path, config_hash: Optional[str] = None, manager=None) -> Path:
    """Write a checkpoint atomically (through ``manager`` when given, for backups)."""
    data = encode_checkpoint(ens, config_hash)
    if manager is not None:
        return manager.write_bytes(str(path), data)
    return atomic_write(Path(path), data)


def load_checkpoint(path: Path, expected_geometry: Optional[GameGeometry] = None) -> OperatorEnsemble:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    ens = decode_checkpoint(path.read_bytes(), expected_geometry)
    logger.info("Loaded checkpoint %s (%d parameters)", path, ens.flat_parameters().size)
    return ens


def read_descriptor(path: Path) -> Dict[str, Any]:
    descriptor, _ = _split(Path(path).read_bytes())
    return descriptor
