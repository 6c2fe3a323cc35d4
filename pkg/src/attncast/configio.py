"""Flat key-value config files shared by the CLI commands.

Format: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines ignored. Values are coerced from the target dataclass's field types;
unknown keys and malformed values are reported with their line number.
"""

from __future__ import annotations

import dataclasses
import typing

from attncast.errors import ConfigError


def parse_flat_file(path) -> dict[str, tuple[str, int]]:
    """Read ``key = value`` lines into {key: (raw value, line number)}."""
    entries: dict[str, tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = (value.strip(), lineno)
    return entries


def _coerce(value: str, annotation, where: str):
    origin = typing.get_origin(annotation)
    if annotation is int:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: expected integer, got {value!r}") from exc
    if annotation is float:
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: expected number, got {value!r}") from exc
    if annotation is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected boolean, got {value!r}")
    if annotation is str:
        return value
    if origin in (set, frozenset, list, tuple):
        (item_type,) = typing.get_args(annotation) or (str,)
        items = [v.strip() for v in value.split(",") if v.strip()]
        coerced = [_coerce(item, item_type, where) for item in items]
        return origin(coerced)
    if origin is dict:
        key_t, val_t = typing.get_args(annotation)
        out = {}
        for piece in [v.strip() for v in value.split(",") if v.strip()]:
            if ":" not in piece:
                raise ConfigError(f"{where}: expected 'key:value' pairs, got {piece!r}")
            k, v = piece.split(":", 1)
            out[_coerce(k.strip(), key_t, where)] = _coerce(v.strip(), val_t, where)
        return out
    raise ConfigError(f"{where}: unsupported field type {annotation!r}")


def dataclass_from_flat(cls, entries: dict[str, tuple[str, int]], source: str, overrides: dict | None = None):
    """Build a dataclass from parsed flat entries plus typed overrides.

    Every key must name a dataclass field; fields without defaults must be
    present in the file or the overrides.
    """
    hints = typing.get_type_hints(cls)
    field_names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (raw, lineno) in entries.items():
        if key not in field_names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kwargs[key] = _coerce(raw, hints[key], f"{source}:{lineno} ({key})")
    if overrides:
        for key, value in overrides.items():
            if key not in field_names:
                raise ConfigError(f"{source}: unknown override key {key!r}")
            if value is not None:
                kwargs[key] = value
    missing = [
        f.name
        for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING
        and f.default_factory is dataclasses.MISSING
        and f.name not in kwargs
    ]
    if missing:
        raise ConfigError(f"{source}: missing required keys {', '.join(sorted(missing))}")
    return cls(**kwargs)
