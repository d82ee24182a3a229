"""Shared JSON config plumbing: canonical serialization and pointer errors."""
from __future__ import annotations

import json

__all__ = ["ConfigError", "canonical_dumps", "load_json_file"]


class ConfigError(ValueError):
    """A config schema violation, addressable by a JSON pointer."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(message)
        self.pointer = pointer

    def to_json(self) -> str:
        return canonical_dumps({"error": "config", "message": str(self),
                                "pointer": self.pointer})


def canonical_dumps(obj) -> str:
    """Canonical JSON: sorted keys, minimal separators, no trailing newline."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_json_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}")
