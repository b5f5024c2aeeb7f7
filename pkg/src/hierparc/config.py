"""Flat ``key = value`` config files and layered resolution.

Precedence, highest first: explicit overrides (CLI flags), ``HIERPARC_*``
environment variables, the config file, built-in defaults.
"""

from __future__ import annotations

import dataclasses
import os
import typing

from .errors import FormatError, ValidationError

ENV_PREFIX = "HIERPARC_"


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.lower()] = value
    return out


def format_kv(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def env_values(keys, environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k: environ[ENV_PREFIX + k.upper()] for k in keys if ENV_PREFIX + k.upper() in environ}


def _coerce(value, annotation, name):
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if annotation is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if annotation in (int, float, str):
            return annotation(value)
        if origin is tuple:
            item = args[0] if args else str
            return tuple(item(v) for v in value.split(",") if v.strip())
        if type(None) in args:
            if value.lower() in ("", "none"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(value, inner, name)
    except ValueError as exc:
        raise ValidationError(f"bad value for {name}: {value!r}") from exc
    return value


def resolve(cls, file_values=None, overrides=None, environ=None):
    """Build dataclass ``cls`` from defaults < file < environment < overrides."""
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    merged: dict[str, object] = {}
    sources: dict[str, str] = {}
    for label, layer in (
        ("file", file_values or {}),
        ("env", env_values(names, environ)),
        ("flag", {k: v for k, v in (overrides or {}).items() if v is not None}),
    ):
        for key, value in layer.items():
            if key not in names:
                if label == "file":
                    raise ValidationError(f"unknown config key {key!r}")
                continue
            merged[key] = value
            sources[key] = label
    kwargs = {k: _coerce(v, hints[k], k) for k, v in merged.items()}
    return cls(**kwargs), sources
