"""INI-style run configuration mapped onto the library dataclasses.

A file holds ``[section]`` blocks of ``key = value`` lines. Every key must
name a field of the dataclass bound to its section; anything else is an
error rather than a silently ignored typo.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, Optional, get_args, get_origin, get_type_hints


class ConfigError(ValueError):
    pass


def _convert(raw: str, hint, key: str):
    origin = get_origin(hint)
    args = [a for a in get_args(hint) if a is not type(None)]
    if origin is not None and type(None) in get_args(hint):
        if raw.strip().lower() in ("", "none"):
            return None
        return _convert(raw, args[0], key)
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw.strip()
        if hint is tuple or origin is tuple:
            item = args[0] if args else str
            return tuple(_convert(p, item, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def field_types(cls) -> dict[str, Any]:
    hints = get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        if hint is tuple or get_origin(hint) is tuple:
            default = f.default if f.default is not dataclasses.MISSING else ()
            elem = type(default[0]) if default else str
            hint = tuple[elem, ...]
        out[f.name] = hint
    return out


def build(cls, values: Mapping[str, str], where: str = ""):
    """Instantiate ``cls`` from raw strings, rejecting unknown keys."""
    types = field_types(cls)
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"{where}unknown key(s) {unknown}; valid keys: {sorted(types)}")
    kwargs = {k: _convert(v, types[k], where + k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{exc}") from None


def read_sections(path, allowed: Mapping[str, type]) -> dict[str, dict[str, str]]:
    """Raw ``{section: {key: value}}`` from a file, restricted to ``allowed`` sections."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    extra = sorted(set(parser.sections()) - set(allowed))
    if extra:
        raise ConfigError(f"{p}: unknown section(s) {extra}; expected {sorted(allowed)}")
    return {s: dict(parser[s]) for s in parser.sections()}


def load_config(path: Optional[str], allowed: Mapping[str, type],
                overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> dict[str, Any]:
    """One dataclass instance per allowed section; CLI ``overrides`` beat file values."""
    raw = read_sections(path, allowed) if path else {}
    out = {}
    for section, cls in allowed.items():
        values = {k: v for k, v in raw.get(section, {}).items()}
        for k, v in (overrides or {}).get(section, {}).items():
            if v is not None:
                values[k] = v if isinstance(v, str) else _to_text(v)
        out[section] = build(cls, values, where=f"[{section}] ")
    return out


def _to_text(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def dump(instances: Mapping[str, Any]) -> dict[str, dict]:
    """JSON-ready echo of every section."""
    return {s: json.loads(json.dumps(dataclasses.asdict(obj))) for s, obj in instances.items()}
