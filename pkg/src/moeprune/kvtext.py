"""Line-oriented ``dotted.key = <json value>`` text.

Used for run config files and checkpoint headers. Nested dicts flatten to
dotted keys; values are JSON literals, so floats round-trip exactly. Blank
lines and ``#`` comments are ignored on read.
"""

from __future__ import annotations

import json

from .errors import ConfigError


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    items = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and all(isinstance(x, str) for x in v):
            items.extend(_flatten(v, key + "."))
        else:
            items.append((key, v))
    return items


def dumps(d: dict) -> str:
    lines = []
    for key, value in _flatten(d):
        if "=" in key or any(c.isspace() for c in key):
            raise ConfigError(f"bad key {key!r}")
        lines.append(f"{key} = {json.dumps(value, sort_keys=True, separators=(', ', ': '))}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: value for {key!r} is not valid JSON ({exc.msg})") from None
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key!r} conflicts with an earlier scalar")
        if parts[-1] in node:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        node[parts[-1]] = parsed
    return out
