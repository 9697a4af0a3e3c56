"""``WSTAN-CKPT v1`` text container for named float64 tensors.

Layout::

    WSTAN-CKPT v1
    meta <key>=<value>          (zero or more)
    tensor <name> <d1> <d2> ...
    <values, whitespace separated, 17 significant digits>
    ...

17 significant digits round-trip every double exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

HEADER = "WSTAN-CKPT v1"


class CheckpointError(ValueError):
    pass


def _encode(a: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(a).reshape(-1))


def dumps(tensors: Mapping[str, object], meta: Mapping[str, str] | None = None) -> str:
    lines = [HEADER]
    for k, v in (meta or {}).items():
        if "\n" in str(v) or "=" in k:
            raise CheckpointError(f"bad meta entry {k!r}")
        lines.append(f"meta {k}={v}")
    for name, t in tensors.items():
        arr = np.asarray(getattr(t, "values", t), dtype=np.float64)
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        lines.append(" ".join(["tensor", name, *map(str, arr.shape)]))
        lines.append(_encode(arr))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    lines = text.split("\n")
    if not lines or lines[0].strip() != HEADER:
        raise CheckpointError(f"missing header {HEADER!r}")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        if line.startswith("meta "):
            k, _, v = line[5:].partition("=")
            meta[k] = v
            i += 1
        elif line.startswith("tensor "):
            parts = line.split()
            if len(parts) < 2:
                raise CheckpointError(f"line {i + 1}: malformed tensor header")
            name, shape = parts[1], tuple(int(d) for d in parts[2:])
            if i + 1 >= len(lines):
                raise CheckpointError(f"line {i + 1}: tensor {name} has no values")
            vals = np.array([float(x) for x in lines[i + 1].split()], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise CheckpointError(
                    f"line {i + 2}: tensor {name} expects {int(np.prod(shape))} values, got {vals.size}")
            tensors[name] = vals.reshape(shape)
            i += 2
        else:
            raise CheckpointError(f"line {i + 1}: unexpected content {line[:40]!r}")
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, object], meta: Mapping[str, str] | None = None) -> None:
    Path(path).write_text(dumps(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_text())
