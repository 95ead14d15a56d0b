"""Plain-text key=value run configuration and resolved snapshots."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping


class ConfigError(ValueError):
    pass


def parse_key_values(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_key_values(path) -> dict[str, str]:
    path = Path(path)
    return parse_key_values(path.read_text(encoding="utf-8"), str(path))


def format_key_values(values: Mapping[str, object]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = ""
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_snapshot(out_dir, values: Mapping[str, object], name: str = "run_config.txt") -> Path:
    """Write the resolved configuration next to a run's outputs."""
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_key_values(values), encoding="utf-8")
    return path
