"""Plain-text ``key = value`` configuration files.

Files are INI-style with the sections ``[lmc]``, ``[kernels]``, ``[model]`` and
``[train]``. Each section maps onto one of the package's config dataclasses;
values are coerced to the dataclass field types. Precedence is
flags > file > compiled defaults, applied by :func:`resolve`.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from pathlib import Path
from typing import Any, Mapping

SECTIONS = ("lmc", "kernels", "model", "train")

WORKERS_ENV = "TIMEPFN_WORKERS"


def default_workers() -> int:
    value = os.environ.get(WORKERS_ENV)
    if not value:
        return 1
    try:
        workers = int(value)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {value!r}") from exc
    return max(1, workers)


def read_config(path: str | os.PathLike | None) -> dict[str, dict[str, str]]:
    """Read a config file into ``{section: {key: raw string}}``.

    Unknown sections are rejected so that typos do not silently fall back to
    defaults.
    """
    if path is None:
        return {}
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # keys such as N and T are case-sensitive
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}] in {path}")
        out[section] = dict(parser.items(section))
    return out


def _coerce(raw: Any, annotation: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none", "null"):
            return None
        return _coerce(raw, inner[0])
    if origin is tuple:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        elem = args[0] if args else str
        return tuple(_coerce(s, elem) for s in items)
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot read {raw!r} as a boolean")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    return raw.strip()


def build(cls, *layers: Mapping[str, Any] | None):
    """Construct dataclass ``cls`` from defaults overlaid by ``layers`` in order.

    Later layers win. ``None`` values inside a layer are treated as "not set",
    which lets argparse namespaces with unset flags be passed directly.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values: dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        for key, raw in layer.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown {cls.__name__} option {key!r}")
            if raw is None:
                continue
            values[key] = _coerce(raw, hints[key])
    return cls(**values)


def resolve(cls, config: Mapping[str, Mapping[str, str]], section: str,
            flags: Mapping[str, Any] | None = None):
    return build(cls, config.get(section), flags)


def as_dict(obj) -> dict[str, Any]:
    out = dataclasses.asdict(obj)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out
