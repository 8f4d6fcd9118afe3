"""Small output helpers: atomic file writes and numpy-aware JSON."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no NaN/inf literals
        return None if not math.isfinite(v) else v
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=False) + "\n"


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(Path(path), dumps(obj))


def fmt(x) -> str:
    """Locale-independent full-precision decimal; empty for missing values."""
    if x is None:
        return ""
    v = float(x)
    if not math.isfinite(v):
        return ""
    return repr(v)


def matrix_csv(matrix, row_labels=None, col_labels=None) -> str:
    m = np.asarray(matrix, dtype=float)
    lines = []
    if col_labels is not None:
        head = ([""] if row_labels is not None else []) + [str(c) for c in col_labels]
        lines.append(",".join(head))
    for i, row in enumerate(m):
        cells = [fmt(v) for v in row]
        if row_labels is not None:
            cells.insert(0, str(row_labels[i]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def rows_csv(header, rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(fmt(v) if v is None or isinstance(v, (float, np.floating)) else str(v) for v in row))
    return "\n".join(out) + "\n"
