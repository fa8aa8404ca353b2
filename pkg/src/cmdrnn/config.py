"""Flat ``key = value`` text files used for synthetic configs and manifests."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        values[key] = value
    return values


def load_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_kv(text, source=str(path))


def _convert(raw: str, kind, key: str, source: str):
    if typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        kind = args[0]
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if typing.get_origin(kind) in (list, tuple):
            (item,) = typing.get_args(kind)[:1]
            return [item(v) for v in raw.replace(",", " ").split()]
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{source}: bad value {raw!r} for {key!r}") from None


def coerce_fields(cls, values: dict[str, str], source: str = "<config>") -> dict:
    """Convert string values to the annotated field types of dataclass ``cls``.

    Unknown keys are rejected so typos fail loudly.
    """
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    return {k: _convert(v, hints[k], k, source) for k, v in values.items()}
