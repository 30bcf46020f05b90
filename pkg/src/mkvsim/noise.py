"""Time grids and counter-based Brownian increments.

Every Gaussian draw is a pure function of ``(seed, stream, particle, position)``:
each particle owns a Philox key and reads a fixed position of its counter
stream, and uniforms are mapped to normals by inverse CDF (one uniform per
normal). Nothing depends on generation order, so splitting the work over
threads or over blocks of steps gives bit-identical arrays.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

# particle slot reserved for the common path
COMMON = (1 << 56) - 1

STREAM_INCREMENTS = 0
STREAM_INITIAL = 1
STREAM_AUX = 2

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform mesh ``t_i = i/n`` covering ``[0, horizon]``."""

    n: int
    horizon: float
    times: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return 1.0 / self.n

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def kappa(self, t):
        """Largest grid point ``<= t`` (the frozen-time map of the scheme)."""
        idx = self.index_floor(t)
        return idx / self.n

    def index_floor(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.floor(t * self.n + _GRID_TOL).astype(int)
        idx = np.clip(idx, 0, self.steps)
        return idx if idx.ndim else int(idx)

    def index_of(self, t: float) -> int:
        """Index of grid time ``t``; raises if ``t`` is not on the grid."""
        k = round(t * self.n)
        if k < 0 or k > self.steps or abs(k - t * self.n) > _GRID_TOL * max(1, self.n):
            raise ValueError(f"lag misaligned: t={t} is not a point of the 1/{self.n} grid")
        return k


def make_grid(n: int, horizon: float) -> TimeGrid:
    if n < 1 or int(n) != n:
        raise ValueError("mesh parameter n must be a positive integer")
    if not horizon > 0:
        raise ValueError("empty horizon")
    # last step overshoots the horizon when n*T is not an integer
    steps = int(math.ceil(horizon * n - _GRID_TOL))
    steps = max(steps, 1)
    times = np.arange(steps + 1) / n
    times.setflags(write=False)
    return TimeGrid(int(n), float(horizon), times)


# Acklam's rational approximation of the standard normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _tail(q):
    num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
    den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
    return num / den


def normal_icdf(u):
    """Standard normal quantile, relative error below 1.15e-9 on (0, 1)."""
    u = np.asarray(u, dtype=float)
    q = u - 0.5
    r = q * q
    num = ((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    x = num * q / den
    lo = u < _P_LOW
    if np.any(lo):
        x[lo] = _tail(np.sqrt(-2.0 * np.log(u[lo])))
    hi = u > 1.0 - _P_LOW
    if np.any(hi):
        x[hi] = -_tail(np.sqrt(-2.0 * np.log1p(-u[hi])))
    return x


def _raw_to_uniform(raw: np.ndarray) -> np.ndarray:
    # 53 high bits, shifted to the open interval (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def _key(seed: int, stream: int, particle: int) -> int:
    if not 0 <= particle <= COMMON:
        raise ValueError("particle id out of range")
    return (int(seed) & 0xFFFFFFFFFFFFFFFF) | (((stream << 56) | particle) << 64)


def _stream_raw(seed: int, stream: int, particle: int, start: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=_key(seed, stream, particle))
    block, skip = divmod(start, 4)
    if block:
        bitgen.advance(block)
    return bitgen.random_raw(skip + count)[skip:]


def stream_normals(seed: int, stream: int, particle: int, start: int, count: int) -> np.ndarray:
    """Normals at positions ``start .. start+count-1`` of one particle's stream."""
    return normal_icdf(_raw_to_uniform(_stream_raw(seed, stream, particle, start, count)))


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("MKVSIM_THREADS", "1") or 1)
    return max(1, int(threads))


def particle_normals(seed, stream, particle_ids, start, count, threads=None) -> np.ndarray:
    """Array ``[len(particle_ids), count]`` of stream normals, one row per particle."""
    ids = np.asarray(particle_ids, dtype=np.int64).ravel()
    out = np.empty((len(ids), count))

    def fill(lo, hi):
        raw = np.empty((hi - lo, count), dtype=np.uint64)
        for r in range(lo, hi):
            raw[r - lo] = _stream_raw(seed, stream, int(ids[r]), start, count)
        out[lo:hi] = normal_icdf(_raw_to_uniform(raw))

    threads = resolve_threads(threads)
    if threads == 1 or len(ids) < 2 * threads:
        fill(0, len(ids))
    else:
        edges = np.linspace(0, len(ids), threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, edges[:-1], edges[1:]))
    return out


@dataclass(frozen=True)
class NoiseBundle:
    """Common increments ``[steps, d_B]`` and idiosyncratic ``[N, steps, d_W]``."""

    seed: int
    grid: TimeGrid
    common_increments: np.ndarray = field(repr=False)
    idio_increments: np.ndarray = field(repr=False)
    particle_ids: np.ndarray = field(repr=False)
    common_seed: int | None = None

    @property
    def N(self) -> int:
        return self.idio_increments.shape[0]

    @property
    def d_B(self) -> int:
        return self.common_increments.shape[1]

    @property
    def d_W(self) -> int:
        return self.idio_increments.shape[2]

    def common_path(self) -> np.ndarray:
        """``B`` at grid times, shape ``[steps+1, d_B]`` with ``B_0 = 0``."""
        return _cumulate(self.common_increments, axis=0)

    def idio_paths(self) -> np.ndarray:
        """``W^i`` at grid times, shape ``[N, steps+1, d_W]``."""
        return _cumulate(self.idio_increments, axis=1)


def _cumulate(incs: np.ndarray, axis: int) -> np.ndarray:
    shape = list(incs.shape)
    shape[axis] = 1
    return np.concatenate([np.zeros(shape), np.cumsum(incs, axis=axis)], axis=axis)


def sample_bundle(seed: int, grid: TimeGrid, N: int, d_B: int = 1, d_W: int = 1,
                  particle_ids=None, common_seed: int | None = None,
                  threads: int | None = None) -> NoiseBundle:
    """Draw the increments of one common path and ``N`` idiosyncratic paths.

    Increment ``(particle i, step k, coordinate j)`` sits at stream position
    ``k*d + j`` of particle ``i``. ``common_seed`` lets two bundles share ``B``
    while their ``W^i`` differ.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    ids = np.arange(N) if particle_ids is None else np.array(particle_ids, dtype=np.int64)
    if len(ids) != N:
        raise ValueError("particle_ids must have length N")
    steps = grid.steps
    scale = math.sqrt(grid.dt)
    cseed = seed if common_seed is None else common_seed
    common = stream_normals(cseed, STREAM_INCREMENTS, COMMON, 0, steps * d_B)
    common = (common * scale).reshape(steps, d_B)
    idio = particle_normals(seed, STREAM_INCREMENTS, ids, 0, steps * d_W, threads)
    idio = (idio * scale).reshape(N, steps, d_W)
    for arr in (common, idio, ids):
        arr.setflags(write=False)
    return NoiseBundle(int(seed), grid, common, idio, ids, common_seed)
