"""Flat ``key = value`` text configs with ``[section]`` headers.

Used for run configs and for the config block embedded in checkpoints.
Errors carry the 1-based line number they were found on.
"""

from __future__ import annotations

import dataclasses
import typing
from typing import Any

from .errors import ConfigError


class ConfigParseError(ConfigError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


@dataclasses.dataclass
class Section:
    name: str
    lineno: int
    values: dict[str, str] = dataclasses.field(default_factory=dict)
    lines: dict[str, int] = dataclasses.field(default_factory=dict)


def parse_config(text: str) -> dict[str, Section]:
    """Split config text into sections. Keys before any header land in section ``""``."""
    sections: dict[str, Section] = {}
    current = sections.setdefault("", Section("", 0))
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigParseError(f"malformed section header {raw.strip()!r}", lineno)
            name = line[1:-1].strip()
            if name in sections and name:
                raise ConfigParseError(f"duplicate section [{name}]", lineno)
            current = sections[name] = Section(name, lineno)
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigParseError("empty key", lineno)
        if key in current.values:
            raise ConfigParseError(f"duplicate key {key!r}", lineno)
        current.values[key] = value
        current.lines[key] = lineno
    if not sections[""].values:
        del sections[""]
    return sections


def _coerce(value: str, typ: Any, key: str, lineno: int | None):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)]
            if value.lower() in ("none", ""):
                return None
            return _coerce(value, inner[0], key, lineno)
        if origin in (tuple, list):
            items = [v.strip() for v in value.split(",") if v.strip()]
            elem = args[0] if args else str
            out = [_coerce(v, elem, key, lineno) for v in items]
            return tuple(out) if origin is tuple else out
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigParseError(f"bad value {value!r} for {key}", lineno) from None


def build_dataclass(cls, section: Section | dict[str, str] | None, **overrides):
    """Instantiate ``cls`` from a section, rejecting unknown keys."""
    if section is None:
        section = Section("", 0)
    if isinstance(section, dict):
        section = Section("", 0, dict(section))
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    kwargs = dict(overrides)
    for key, value in section.values.items():
        lineno = section.lines.get(key)
        if key not in fields or dataclasses.is_dataclass(hints.get(key)):
            raise ConfigParseError(f"unknown key {key!r} in [{section.name}]", lineno)
        kwargs[key] = _coerce(value, hints[key], key, lineno)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        first = min(section.lines.values(), default=section.lineno) if section.lines else section.lineno
        raise ConfigParseError(str(exc), first or None) from exc


def dataclass_section(obj) -> dict[str, str]:
    """Scalar fields of a dataclass as config strings (nested dataclasses skipped)."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            continue
        if isinstance(value, (tuple, list)):
            out[f.name] = ", ".join(str(v) for v in value)
        else:
            out[f.name] = "none" if value is None else str(value)
    return out


def dump_config(sections: dict[str, dict[str, str]]) -> str:
    chunks = []
    for name, values in sections.items():
        lines = [f"[{name}]"] + [f"{k} = {v}" for k, v in values.items()]
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"
