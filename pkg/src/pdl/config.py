"""Flat ``key=value`` text configs shared by the generator, trainer and CLI.

One file may hold keys for several dataclasses; each reader picks its own
keys and ignores the rest. ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import TypeVar

T = TypeVar("T")


def to_kv(obj) -> str:
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, cls) -> dict:
    """Constructor kwargs for dataclass ``cls`` from the lines it recognises."""
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in defaults:
            continue
        d = defaults[k]
        if isinstance(d, tuple):
            items = [s.strip() for s in v.split(",") if s.strip()]
            out[k] = tuple(int(s) for s in items) if d and isinstance(d[0], int) else tuple(items)
        elif isinstance(d, bool):
            out[k] = v.lower() in ("1", "true", "yes", "on")
        elif isinstance(d, int):
            out[k] = int(v)
        elif isinstance(d, float):
            out[k] = float(v)
        elif v.lower() in ("", "none"):
            out[k] = None
        else:
            out[k] = v
    return out


def from_kv(cls: type[T], text: str, **overrides) -> T:
    kw = parse_kv(text, cls)
    kw.update(overrides)
    return cls(**kw)


def load_kv(cls: type[T], path: str | Path | None, **overrides) -> T:
    text = Path(path).read_text() if path else ""
    return from_kv(cls, text, **overrides)
