"""
Validation of run configuration files.

Checks the raw YAML mapping against the section dataclasses before anything is
built: unknown keys (with a closest-match suggestion), value types and nested
section structure.
"""
from dataclasses import fields
from typing import Any, Dict, Iterable, List, Mapping, Tuple

from rapidfuzz import fuzz, process


def suggest(key: str, choices: Iterable[str], cutoff: float = 60.0) -> str:
    """`` (did you mean 'x'?)`` for the closest choice, or an empty string."""
    match = process.extractOne(key, list(choices), scorer=fuzz.WRatio, score_cutoff=cutoff)
    return f" (did you mean '{match[0]}'?)" if match else ""


class ConfigValidator:
    """Validates the structure of a run configuration mapping.

    ``sections`` maps dotted section paths (``"trainer"``,
    ``"trainer.hybrid"``) to the dataclass holding that section's keys;
    ``top_level`` maps top-level scalar keys to their defaults.
    """

    def __init__(self, sections: Mapping[str, type], top_level: Mapping[str, Any]):
        self.sections = dict(sections)
        self.top_level = dict(top_level)
        self.errors: List[str] = []
        self.warnings: List[str] = []

    def validate_config(self, data: Any) -> Tuple[bool, List[str], List[str]]:
        """
        Validate a raw configuration mapping.
        Returns (is_valid, errors, warnings).
        """
        self.errors.clear()
        self.warnings.clear()

        if data is None:
            data = {}
        if not isinstance(data, dict):
            self.errors.append(f"Configuration must be a mapping, got {type(data).__name__}")
            return False, self.errors.copy(), self.warnings.copy()

        root_sections = [path for path in self.sections if "." not in path]
        for key, value in data.items():
            if key in self.top_level:
                self._check_type(key, value, self.top_level[key])
            elif key in root_sections:
                self._check_section(key, value)
            else:
                self.errors.append(
                    f"Unknown configuration key '{key}'{suggest(str(key), [*self.top_level, *root_sections])}"
                )

        return len(self.errors) == 0, self.errors.copy(), self.warnings.copy()

    def _check_section(self, path: str, values: Any) -> None:
        if values is None:
            return
        if not isinstance(values, dict):
            self.errors.append(f"Section '{path}' must be a mapping")
            return
        defaults = {f.name: f.default for f in fields(self.sections[path])}
        nested = {
            name[len(path) + 1:]: name
            for name in self.sections
            if name.startswith(path + ".") and "." not in name[len(path) + 1:]
        }
        for key, value in values.items():
            if key in nested:
                self._check_section(nested[key], value)
            elif key in defaults:
                self._check_type(f"{path}.{key}", value, defaults[key])
            else:
                self.errors.append(
                    f"Unknown key '{key}' in section '{path}'{suggest(str(key), [*defaults, *nested])}"
                )

    def _check_type(self, name: str, value: Any, default: Any) -> None:
        if isinstance(default, bool):
            ok = isinstance(value, bool)
            expected = "a boolean"
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
            expected = "an integer"
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            expected = "a number"
        elif isinstance(default, str):
            ok = isinstance(value, str)
            expected = "a string"
        elif isinstance(default, tuple):
            ok = isinstance(value, (list, tuple))
            expected = "a list"
        else:
            return
        if not ok:
            self.errors.append(f"Invalid type for {name}: expected {expected}, got {type(value).__name__}")


def collect_domain_errors(sections: Dict[str, Any]) -> List[str]:
    """``validation_errors()`` of every built section, prefixed with its name."""
    errors = []
    for name, section in sections.items():
        check = getattr(section, "validation_errors", None)
        if check is not None:
            errors.extend(f"{name}: {message}" for message in check())
    return errors
