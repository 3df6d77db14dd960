"""Flat ``key = value`` text configs mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ContractError


class ConfigError(ContractError):
    pass


def parse_lines(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    return parse_lines(Path(path).read_text())


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _coerce(raw, args[0])
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
        return tuple(_coerce(p.strip(), inner) for p in parts)
    if tp is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def build(cls, values: dict[str, str], strict: bool = True):
    """Instantiate dataclass ``cls`` from string values (defaults fill the rest)."""
    hints = typing.get_type_hints(cls)
    names = set(field_names(cls))
    unknown = sorted(set(values) - names)
    if strict and unknown:
        raise ConfigError(f"unknown keys {unknown}; valid keys: {sorted(names)}")
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            continue
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cls(**kwargs)


def to_flat(obj) -> dict[str, str]:
    return {f.name: format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
