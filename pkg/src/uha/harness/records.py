"""Append-only JSON-lines persistence for run records."""
from __future__ import annotations

import json
import math
import os
import threading
from pathlib import Path

import numpy as np

from .. import __version__
from ..rng import RNG_ALGORITHM


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays become Python values, NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "_asdict"):
        return _clean(obj._asdict())
    return obj


def stamp(record: dict) -> dict:
    out = {"version": __version__, "rng_algorithm": RNG_ALGORITHM}
    out.update(record)
    return out


class RecordWriter:
    """Serialized appends; each record is one flushed line, so a crash leaves a parseable prefix."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> dict:
        rec = _clean(stamp(record))
        if self.path is None:
            return rec
        line = json.dumps(rec, sort_keys=True)
        with self._lock, open(self.path, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return rec


def read_records(path: str | Path) -> list[dict]:
    """All complete records; a truncated final line is ignored."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return out
