"""
Interactive checkpoint selection.
"""
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from InquirerPy import inquirer

from ..exceptions import CheckpointError
from ..utils.file_ops import CHECKPOINT_SUFFIX

BROWSE = "Browse for file..."


def is_interactive() -> bool:
    return sys.stdin.isatty() and sys.stdout.isatty()


def _valid_checkpoint(path: str) -> bool:
    return Path(path).exists() and Path(path).suffix.lower() == CHECKPOINT_SUFFIX


def select_checkpoint(
    candidates: Sequence[str],
    message: str = "Select checkpoint:",
    interactive: Optional[Callable[[], bool]] = None,
) -> str:
    """Offer the checkpoints found in the output directory.

    Raises:
        CheckpointError: stdin or stdout is not a terminal, so no prompt can
            be shown and the checkpoint must be passed explicitly.
    """
    if not (interactive or is_interactive)():
        raise CheckpointError("No checkpoint given (pass --checkpoint PATH when not running interactively)")

    if not candidates:
        return inquirer.filepath(
            message="Enter path to checkpoint:",
            validate=_valid_checkpoint,
            invalid_message=f"File must exist and have {CHECKPOINT_SUFFIX} extension",
        ).execute()

    selected = inquirer.select(message=message, choices=[*candidates, BROWSE]).execute()
    if selected == BROWSE:
        return inquirer.filepath(
            message="Enter path to checkpoint:",
            validate=_valid_checkpoint,
            invalid_message=f"File must exist and have {CHECKPOINT_SUFFIX} extension",
        ).execute()
    return selected
