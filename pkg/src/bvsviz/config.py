"""Plain ``key = value`` config files and dataclass (de)serialization."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment; blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_kv(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in values.items())


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if hasattr(v, "name") and hasattr(v, "value"):  # enums
        return v.name
    return str(v)


def _coerce(text: str, tp) -> Any:
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def to_dict(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def from_dict(cls, values: dict[str, str], base=None):
    """Build dataclass ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = to_dict(base) if base is not None else {}
    for key, text in values.items():
        kwargs[key] = _coerce(text, hints[key]) if isinstance(text, str) else text
    return cls(**kwargs)
