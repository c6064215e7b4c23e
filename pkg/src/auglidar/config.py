"""Versioned ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Every file must declare
``version = 1``; unknown keys are errors so physics constants are never
silently misspelled.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from pathlib import Path

CONFIG_VERSION = 1
FRAME_HEADER = "# frame: right-handed, z-up, meters (background scans assumed z-up metric)"


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    version = values.pop("version", None)
    if version is None:
        raise ConfigError(f"{source}: missing 'version' key")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"{source}: unsupported config version {version!r}")
    return values


def _convert(value: str, annotation, key: str, source: str):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if value.lower() in ("none", ""):
            return None
        annotation = next(a for a in args if a is not type(None))
    try:
        if annotation is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if annotation in (int, float, str):
            return annotation(value)
        if annotation is Path:
            return Path(value)
    except ValueError:
        raise ConfigError(f"{source}: bad value {value!r} for {key!r}") from None
    raise ConfigError(f"{source}: cannot parse {key!r} of type {annotation}")


def load_dataclass(cls, values: dict[str, str], source: str = "<config>", base: Path | None = None):
    """Build dataclass ``cls`` from string values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    required = sorted(f.name for f in dataclasses.fields(cls)
                      if f.init and f.default is dataclasses.MISSING
                      and f.default_factory is dataclasses.MISSING)
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing keys {missing}")
    kwargs = {}
    for key, value in values.items():
        converted = _convert(value, hints[key], key, source)
        if isinstance(converted, Path) and base is not None and not converted.is_absolute():
            converted = base / converted
        kwargs[key] = converted
    return cls(**kwargs)


def dump_dataclass(obj, header: str = "") -> str:
    lines = [header] if header else []
    lines += [FRAME_HEADER, f"version = {CONFIG_VERSION}"]
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
