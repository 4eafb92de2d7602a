"""
Artifact file operations: atomic writes, timestamped backups, CSV files with
provenance headers and YAML manifests.
"""
import csv
import io
import logging
import os
import shutil
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import yaml

logger = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".ckpt"


def atomic_write(path: Path, data: bytes) -> Path:
    """Write ``data`` to a temporary sibling of ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def format_csv(columns: Sequence[str], rows: Iterable[Mapping[str, Any]], provenance: Mapping[str, Any] = ()) -> str:
    """CSV text: ``# key: value`` provenance lines, the header row, then the rows."""
    buffer = io.StringIO()
    for key, value in dict(provenance).items():
        buffer.write(f"# {key}: {value}\n")
    writer = csv.DictWriter(buffer, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def parse_csv(text: str) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Inverse of ``format_csv``: (provenance, rows as strings)."""
    provenance: Dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# ") and not body:
            key, _, value = line[2:].partition(": ")
            provenance[key] = value
        else:
            body.append(line)
    return provenance, list(csv.DictReader(body))


class ArtifactManager:
    """Owns an output directory and every artifact written into it."""

    def __init__(self, output_dir: str, provenance: Optional[Mapping[str, Any]] = None, keep_backups: bool = True):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.backup_dir = self.output_dir / "backups"
        self.provenance = dict(provenance or {})
        self.keep_backups = keep_backups

    def path(self, name: str) -> Path:
        candidate = Path(name)
        return candidate if candidate.is_absolute() else self.output_dir / candidate

    def create_backup(self, target: Path) -> Optional[str]:
        """Copy an existing artifact to ``backups/<stem>_YYYYMMDD_HHMMSS.bak``."""
        target = Path(target)
        if not target.exists():
            return None
        self.backup_dir.mkdir(exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        backup_path = self.backup_dir / f"{target.stem}_{timestamp}.bak"
        shutil.copy2(target, backup_path)
        logger.debug("Backed up %s to %s", target, backup_path)
        return str(backup_path)

    def write_bytes(self, name: str, data: bytes) -> Path:
        target = self.path(name)
        if self.keep_backups:
            self.create_backup(target)
        atomic_write(target, data)
        logger.info("Wrote %s", target)
        return target

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_csv(
        self,
        name: str,
        columns: Sequence[str],
        rows: Iterable[Mapping[str, Any]],
        extra_provenance: Optional[Mapping[str, Any]] = None,
    ) -> Path:
        provenance = {**self.provenance, **dict(extra_provenance or {})}
        return self.write_text(name, format_csv(columns, rows, provenance))

    def read_csv(self, name: str) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
        target = self.path(name)
        if not target.exists():
            raise FileNotFoundError(f"CSV file not found: {target}")
        return parse_csv(target.read_text(encoding="utf-8"))

    def write_yaml(self, name: str, data: Mapping[str, Any]) -> Path:
        document = {"provenance": dict(self.provenance), **dict(data)}
        return self.write_text(name, dump_yaml(document))

    def load_yaml(self, name: str) -> Dict[str, Any]:
        return load_yaml(self.path(name))

    def list_checkpoints(self) -> List[str]:
        """Checkpoints in the output directory, newest first."""
        found = [str(p) for p in self.output_dir.glob(f"*{CHECKPOINT_SUFFIX}")]
        found.sort(key=lambda p: (os.path.getmtime(p), p), reverse=True)
        return found

    def list_backups(self, stem: str) -> List[str]:
        if not self.backup_dir.exists():
            return []
        backups = [str(p) for p in self.backup_dir.glob(f"{stem}_*.bak")]
        backups.sort(key=lambda p: os.path.getmtime(p), reverse=True)
        return backups


def dump_yaml(data: Any, sort_keys: bool = False) -> str:
    return yaml.safe_dump(
        data, default_flow_style=False, allow_unicode=True, width=120, indent=2, sort_keys=sort_keys
    )


def load_yaml(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"YAML file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle)
    return data or {}
