"""CSV output with shortest round-trip number formatting."""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    text = str(value)
    if any(ch in text for ch in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    width = len(header)
    for row in rows:
        if len(row) != width:
            raise ValueError(f"row of width {len(row)} under a header of width {width}")
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    text = csv_text(header, rows)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return os.fspath(path)


def trajectory_rows(paths: np.ndarray, times: np.ndarray):
    """``step,time,particle,coord,value`` rows, step-major."""
    N, L, d = paths.shape
    for k in range(L):
        t = float(times[k])
        for i in range(N):
            for j in range(d):
                yield k, t, i, j + 1, float(paths[i, k, j])


def trajectory_header():
    return ("step", "time", "particle", "coord", "value")


def moment_header(d: int):
    return ("time", *(f"mean_{j + 1}" for j in range(d)), *(f"var_{j + 1}" for j in range(d)))


def moment_rows(paths: np.ndarray, times: np.ndarray):
    means = paths.mean(axis=0)
    var = paths.var(axis=0)
    for k in range(paths.shape[1]):
        yield (float(times[k]), *means[k].tolist(), *var[k].tolist())
