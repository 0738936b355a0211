"""Run configuration: `key = value` text files with strict key validation."""

from __future__ import annotations

from pathlib import Path

CONFIG_KEYS = (
    "alpha",
    "beta",
    "tau",
    "theta",
    "lr",
    "steps",
    "batch",
    "seed",
    "mode",
    "width",
    "height",
    "classes",
    "depth",
    "background_group",
    "include_positive_in_denominator",
    "out_dir",
)

MODES = ("baseline", "M1", "M2", "M3", "M4")

_FLOAT_KEYS = {"alpha", "beta", "tau", "theta", "lr"}
_INT_KEYS = {"steps", "batch", "seed", "width", "height", "classes", "depth"}
_BOOL_KEYS = {"background_group", "include_positive_in_denominator"}


class ConfigFileError(ValueError):
    pass


def _parse_value(key, raw, where):
    raw = raw.strip()
    if key in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigFileError(f"{where}: key '{key}' needs a number, got {raw!r}") from None
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigFileError(f"{where}: key '{key}' needs an integer, got {raw!r}") from None
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigFileError(f"{where}: key '{key}' needs a boolean, got {raw!r}")
    if key == "mode":
        if raw not in MODES:
            raise ConfigFileError(f"{where}: mode must be one of {MODES}, got {raw!r}")
        return raw
    return raw  # out_dir


def parse_config_text(text, where="config") -> dict:
    """Parse `key = value` lines; `#` starts a comment; unknown keys rejected."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"{where}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigFileError(
                f"{where}:{lineno}: unknown key '{key}'; valid keys: {', '.join(CONFIG_KEYS)}"
            )
        if key in out:
            raise ConfigFileError(f"{where}:{lineno}: duplicate key '{key}'")
        out[key] = _parse_value(key, raw, f"{where}:{lineno}")
    return out


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), where=str(path))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(values: dict) -> str:
    lines = [f"{key} = {format_value(values[key])}" for key in CONFIG_KEYS if key in values]
    return "\n".join(lines) + "\n"
