from __future__ import annotations

import json
import os
import types
import typing
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any, TypeVar, cast

from tcatseg.errors import ValidationError

T = TypeVar("T")

CONFIG_ENV = "TCATSEG_CONFIG"
_TRUE = {"1", "true", "yes", "y", "on"}
_FALSE = {"0", "false", "no", "n", "off"}


def resolve_config_path(arg: str | None) -> str | None:
    """Explicit ``--config`` wins; otherwise the TCATSEG_CONFIG environment variable."""
    if arg:
        return arg
    return os.environ.get(CONFIG_ENV) or None


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValidationError(f"{source}:{no}: empty key")
        out[key] = value
    return out


def load_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` text, or a JSON object of scalars when the file ends in .json."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValidationError(f"{p}: JSON config must be an object")
        return {str(k): _json_scalar(v) for k, v in data.items()}
    return parse_flat(text, str(p))


def _json_scalar(v: Any) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def coerce(value: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is tuple:
        (item, *_) = typing.get_args(hint)
        parts = [s for s in (x.strip() for x in value.split(",")) if s]
        return tuple(coerce(s, item, key) for s in parts)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in typing.get_args(hint) if a is not type(None)]
        if value.lower() in {"", "none"}:
            return None
        return coerce(value, inner[0], key)
    try:
        if hint is bool:
            low = value.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError as exc:
        raise ValidationError(f"config key {key!r}: cannot read {value!r} as {hint}") from exc
    return value


def build(cls: type[T], mapping: dict[str, str]) -> T:
    """Instantiate dataclass ``cls`` from string values; unknown keys are an error."""
    if not is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: coerce(v, hints[k], k) for k, v in mapping.items()}
    return cast(T, cls(**kwargs))


def split_config(mapping: dict[str, str], *classes: type) -> list[Any]:
    """Route each key to the dataclass that declares it; keys nobody declares are rejected."""
    owned: list[dict[str, str]] = [{} for _ in classes]
    for key, value in mapping.items():
        hits = [i for i, c in enumerate(classes) if key in {f.name for f in fields(c)}]
        if not hits:
            raise ValidationError(f"unknown config key: {key}")
        for i in hits:
            owned[i][key] = value
    return [build(c, m) for c, m in zip(classes, owned, strict=True)]


def dump_config(obj: Any) -> str:
    lines = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
