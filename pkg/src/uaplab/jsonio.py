"""Canonical serialization helpers.

Report and artifact files must be byte-identical across reruns, so floats
are always written with 17 significant digits (lossless for f64) and JSON
objects with sorted keys and fixed separators. Writes go through a
temp-file rename so a failing command never leaves a partial artifact.
"""

from __future__ import annotations

import json
import math
import os
import tempfile


def format_float(x: float) -> str:
    if isinstance(x, bool):  # bool is an int subclass; don't format it as one
        raise TypeError("format_float got a bool")
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"non-finite float {x!r} cannot be serialized")
    return f"{x:.17g}"


def canonical_dumps(obj) -> str:
    """JSON text with sorted keys and .17g floats."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        for k in obj:
            if not isinstance(k, str):
                raise TypeError(f"non-string key {k!r}")
        items = (f"{json.dumps(k)}:{canonical_dumps(v)}" for k, v in sorted(obj.items()))
        return "{" + ",".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_dumps(v) for v in obj) + "]"
    # numpy scalars and similar
    if hasattr(obj, "item"):
        return canonical_dumps(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(csv_cell(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")
