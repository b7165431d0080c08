"""Small file helpers shared by the modules."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FileFormatError(ValueError):
    pass


def read_csv_table(path, header: tuple[str, ...], what: str = "rows") -> np.ndarray:
    """Read a numeric CSV with an exact header into an ``(n, len(header))`` array."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FileFormatError(f"{path}: empty file")
    got = tuple(h.strip() for h in lines[0].split(","))
    if got != header:
        raise FileFormatError(f"{path}: expected header {','.join(header)}, got {lines[0]!r}")
    if len(lines) == 1:
        raise FileFormatError(f"{path}: no {what}")
    ncol = len(header)
    out = np.empty((len(lines) - 1, ncol), dtype=np.float64)
    for i, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        if len(parts) != ncol:
            raise FileFormatError(f"{path}:{i + 2}: expected {ncol} columns, got {len(parts)}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise FileFormatError(f"{path}:{i + 2}: {exc}") from None
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise FileFormatError(f"{path}:{int(np.argmax(bad)) + 2}: non-finite value")
    return out


def write_csv_table(path, header: tuple[str, ...], data: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.asarray(data, dtype=np.float64):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
