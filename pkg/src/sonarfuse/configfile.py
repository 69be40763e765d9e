"""Plain-text run configuration.

Config files are `key = value` lines. Blank lines and lines whose first
non-space character is `#` are ignored; everything else must parse.
Keys are validated against a per-command schema so a typo is rejected
with its line number instead of silently falling back to a default.
"""

from __future__ import annotations

from typing import Callable

from .errors import ConfigError

# sentinel: key has no default and must appear in the file
REQUIRED = object()


class Opt:
    """One schema entry: a converter plus a default (or REQUIRED)."""

    __slots__ = ("convert", "default")

    def __init__(self, convert: Callable[[str], object], default=REQUIRED):
        self.convert = convert
        self.default = default


def int_v(s: str) -> int:
    return int(s, 10)


def float_v(s: str) -> float:
    return float(s)


def bool_v(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def str_v(s: str) -> str:
    return s


def choice_v(*allowed: str) -> Callable[[str], str]:
    def convert(s: str) -> str:
        if s not in allowed:
            raise ValueError(
                f"expected one of {', '.join(allowed)}; got {s!r}")
        return s

    return convert


def list_v(s: str) -> tuple:
    """Comma-separated tokens, stripped; empty tokens dropped."""
    return tuple(t.strip() for t in s.split(",") if t.strip())


def parse_config(text: str, schema: dict, source: str = "config") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(
                f"{source}, line {lineno}: expected 'key = value', "
                f"got {raw.strip()!r}")
        key = key.strip()
        val = val.strip()
        if key not in schema:
            raise ConfigError(f"{source}, line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}, line {lineno}: duplicate key "
                              f"{key!r}")
        try:
            values[key] = schema[key].convert(val)
        except ValueError as exc:
            raise ConfigError(
                f"{source}, line {lineno}: bad value for {key!r}: "
                f"{exc}") from exc
    for key, opt in schema.items():
        if key in values:
            continue
        if opt.default is REQUIRED:
            raise ConfigError(f"{source}: missing required key {key!r}")
        values[key] = opt.default
    return values


def load_config(path: str | None, schema: dict) -> dict:
    """Parse a config file; None means all defaults."""
    if path is None:
        return parse_config("", schema, source="defaults")
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, schema, source=path)
