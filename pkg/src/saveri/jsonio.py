"""Canonical JSON serialization shared by every on-disk artifact.

Floats are printed with 17 significant digits, which round-trips IEEE-754
doubles exactly and keeps re-serialization byte-identical. Non-finite
numbers are rejected: no artifact is allowed to contain them.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite number {x!r} cannot be serialized")
    s = format(x, ".17g")
    # keep floats recognizably floats so a round trip preserves the type
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


def dumps(obj: Any) -> str:
    """Serialize to a deterministic JSON string (no trailing newline)."""
    out: list[str] = []
    _render(obj, out)
    return "".join(out)


def _render(obj: Any, out: list[str]) -> None:
    if obj is None or obj is True or obj is False:
        out.append(json.dumps(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if not isinstance(k, str):
                raise TypeError(f"JSON object keys must be strings, got {k!r}")
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(":")
            _render(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _render(v, out)
        out.append("]")
    elif isinstance(obj, np.ndarray):
        _render(obj.tolist(), out)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} to JSON")


def dump_file(obj: Any, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(obj))
        f.write("\n")


def load_file(path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def sha256_of_text(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()
