"""Deterministic JSON reports: sorted keys, floats at 6 significant digits."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

SIG_DIGITS = 6


def _normalize(obj):
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _normalize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return repr(x)
        x = float(f"{x:.{SIG_DIGITS}g}")
        return 0.0 if x == 0 else x
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_normalize(report), indent=2, sort_keys=True) + "\n"


def write_report(report: dict, path) -> Path:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(report))
    os.replace(tmp, path)
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
