"""Log-log slope fits and seed replication."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .noise import resolve_threads


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    points: tuple
    residuals: tuple

    def predict(self, lag: float) -> float:
        return math.exp(self.intercept + self.slope * math.log(lag))


def fit_loglog(points: Sequence[tuple]) -> SlopeFit:
    """Least-squares line through ``(log lag, log estimate)``."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ValueError("fit_loglog needs at least 3 points")
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ValueError("lags and estimates must be positive")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    xm, ym = lx.mean(), ly.mean()
    sxx = np.sum((lx - xm) ** 2)
    if sxx == 0:
        raise ValueError("lags must not all coincide")
    slope = np.sum((lx - xm) * (ly - ym)) / sxx
    intercept = ym - slope * xm
    resid = ly - (intercept + slope * lx)
    dof = len(pts) - 2
    stderr = math.sqrt(np.sum(resid ** 2) / dof / sxx) if dof > 0 else math.nan
    return SlopeFit(float(slope), float(intercept), float(stderr),
                    tuple(zip(lx.tolist(), ly.tolist())), tuple(resid.tolist()))


class ReplicationError(RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"replication failed at seed {seed}: {cause}")
        self.seed = seed


@dataclass(frozen=True)
class Replicates:
    seeds: tuple
    results: tuple
    mean: Any
    stderr: Any

    @property
    def std(self):
        return self.stderr * math.sqrt(len(self.seeds))


def replicate(experiment: Callable[[int], Any], seeds, threads: int | None = None) -> Replicates:
    """Run ``experiment(seed)`` for every seed; mean and standard error across seeds."""
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("no seeds")

    def run(seed):
        try:
            return experiment(seed)
        except Exception as exc:
            raise ReplicationError(seed, exc) from exc

    threads = resolve_threads(threads)
    if threads == 1:
        results = [run(s) for s in seeds]
    else:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, seeds))
    arr = np.asarray(results, dtype=float)
    mean = arr.mean(axis=0)
    if len(seeds) > 1:
        se = arr.std(axis=0, ddof=1) / math.sqrt(len(seeds))
    else:
        se = np.zeros_like(mean)
    if np.ndim(mean) == 0:
        mean, se = float(mean), float(se)
    return Replicates(seeds, tuple(results), mean, se)
