"""Euler particle scheme with a shared common noise.

At every grid time the conditional law is replaced by the empirical measure of
the N particles, which all see the same ``B`` and their own ``W^i``. The
coefficients are frozen at the left grid point, so step ``k`` reads only the
snapshot at ``t_k``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import ASSIGNMENT_LIMIT, EmpiricalMeasure, PowerCost, ot_exact_small, wasserstein_1d, wasserstein_sliced
from .model import CoefficientSpec, InitialCondition
from .moments import SlopeFit, fit_loglog
from .noise import NoiseBundle, TimeGrid, resolve_threads, sample_bundle


class BlowUpError(FloatingPointError):
    def __init__(self, particle: int, step: int):
        super().__init__(f"blow-up at step {step} (particle {particle})")
        self.particle = particle
        self.step = step


@dataclass(frozen=True)
class ParticleEnsemble:
    paths: np.ndarray = field(repr=False)  # [N, steps+1, d_x]
    grid: TimeGrid
    seed: int
    bundle: NoiseBundle | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.paths.shape[0]

    @property
    def d_x(self) -> int:
        return self.paths.shape[2]

    @property
    def initial(self) -> np.ndarray:
        return self.paths[:, 0, :]

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1, :]


class ConditionalLawPath:
    """Empirical time-marginals of an ensemble, one measure per grid time."""

    def __init__(self, paths: np.ndarray, grid: TimeGrid):
        self.paths = paths
        self.grid = grid

    def __len__(self) -> int:
        return self.paths.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[: len(self)]

    def at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.paths[:, k, :])

    def history(self, k: int) -> EmpiricalMeasure:
        """Measure on discrete paths up to grid index ``k``."""
        return EmpiricalMeasure(self.paths[:, : k + 1, :])

    def means(self) -> np.ndarray:
        return self.paths.mean(axis=0)

    def variances(self) -> np.ndarray:
        return self.paths.var(axis=0)


def _chunks(N: int, threads: int):
    if threads <= 1 or N < 2 * threads:
        return [(0, N)]
    edges = np.linspace(0, N, threads + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def step_ensemble(state: np.ndarray, spec: CoefficientSpec, bundle: NoiseBundle, k: int,
                  history: np.ndarray | None = None, measure: EmpiricalMeasure | None = None,
                  threads: int | None = None, pool: ThreadPoolExecutor | None = None) -> np.ndarray:
    """One Euler step ``t_k -> t_{k+1}`` for every particle.

    ``measure`` defaults to the empirical measure of ``state`` (or of
    ``history`` for progressive coefficients). All particles read the same
    snapshot; the returned array is new.
    """
    if not 0 <= k < bundle.grid.steps:
        raise ValueError(f"step index {k} outside the grid")
    t = bundle.grid.times[k]
    dt = bundle.grid.dt
    args = state if spec.markovian else history
    if args is None:
        raise ValueError("progressive coefficients need the particle history")
    if measure is None:
        measure = EmpiricalMeasure(args)
    dW = bundle.idio_increments[:, k, :]
    dB = bundle.common_increments[k]
    out = np.empty_like(state)

    @np.errstate(over="ignore", invalid="ignore")  # non-finite results are reported below
    def work(lo, hi):
        x = args[lo:hi]
        drift = spec.b(t, x, measure)
        diff = (spec.sigma(t, x, measure) * dW[lo:hi, None, :]).sum(axis=-1)
        common = (spec.rho(t, x, measure) * dB[None, None, :]).sum(axis=-1)
        out[lo:hi] = state[lo:hi] + drift * dt + diff + common

    parts = _chunks(len(state), resolve_threads(threads))
    if len(parts) == 1:
        work(*parts[0])
    elif pool is not None:
        list(pool.map(lambda p: work(*p), parts))
    else:
        with ThreadPoolExecutor(len(parts)) as own:
            list(own.map(lambda p: work(*p), parts))
    bad = ~np.isfinite(out)
    if bad.any():
        raise BlowUpError(int(np.argwhere(bad)[0][0]), k)
    return out


def _prepare(spec, init, grid, N, seed, bundle, particle_ids, xi, threads):
    if N < 2 and spec.measure_dependent:
        raise ValueError("measure-dependent coefficients need N >= 2 particles")
    if bundle is None:
        bundle = sample_bundle(seed, grid, N, spec.d_b, spec.d_w, particle_ids, threads=threads)
    elif bundle.N != N or bundle.grid.steps < grid.steps:
        raise ValueError("misaligned inputs: bundle does not match N or grid")
    if xi is None:
        xi = init.sample(seed, bundle.particle_ids, threads)
    xi = np.asarray(xi, dtype=float).reshape(N, spec.d_x)
    if not np.all(np.isfinite(xi)):
        raise ValueError("non-finite initial condition")
    return bundle, xi


def simulate(spec: CoefficientSpec, init: InitialCondition | None, grid: TimeGrid, N: int, seed: int,
             bundle: NoiseBundle | None = None, particle_ids=None, xi=None,
             measure_flow: ConditionalLawPath | None = None,
             threads: int | None = None) -> tuple[ParticleEnsemble, ConditionalLawPath]:
    """Full-trajectory particle simulation.

    ``measure_flow`` substitutes an external flow of measures for the
    ensemble's own empirical law (the map iterated in the contraction
    experiment). ``xi`` overrides draws from ``init``.
    """
    if measure_flow is not None and len(measure_flow) < grid.steps:
        raise ValueError("misaligned inputs: measure flow shorter than the grid")
    bundle, xi = _prepare(spec, init, grid, N, seed, bundle, particle_ids, xi, threads)
    paths = np.empty((N, grid.steps + 1, spec.d_x))
    paths[:, 0] = xi
    threads = resolve_threads(threads)
    with ThreadPoolExecutor(threads) as pool:
        for k in range(grid.steps):
            if measure_flow is not None:
                m = measure_flow.history(k) if not spec.markovian else measure_flow.at(k)
            else:
                m = None
            paths[:, k + 1] = step_ensemble(paths[:, k], spec, bundle, k,
                                            history=None if spec.markovian else paths[:, : k + 1],
                                            measure=m, threads=threads, pool=pool)
    paths.setflags(write=False)
    return ParticleEnsemble(paths, grid, seed, bundle), ConditionalLawPath(paths, grid)


def simulate_streaming(spec: CoefficientSpec, init: InitialCondition | None, grid: TimeGrid, N: int,
                       seed: int, functionals: dict[str, Callable] | None = None,
                       bundle: NoiseBundle | None = None, xi=None, threads: int | None = None):
    """Memory-bounded run: keeps the current state and running functionals only.

    Returns ``(terminal_state, {name: array over grid times})``; the default
    functionals are the ensemble mean and variance.
    """
    if not spec.markovian:
        raise ValueError("streaming mode needs Markovian coefficients")
    if functionals is None:
        functionals = {"mean": lambda x: x.mean(axis=0), "var": lambda x: x.var(axis=0)}
    bundle, state = _prepare(spec, init, grid, N, seed, bundle, None, xi, threads)
    series = {name: [f(state)] for name, f in functionals.items()}
    threads = resolve_threads(threads)
    with ThreadPoolExecutor(threads) as pool:
        for k in range(grid.steps):
            state = step_ensemble(state, spec, bundle, k, threads=threads, pool=pool)
            for name, f in functionals.items():
                series[name].append(f(state))
    return state, {name: np.asarray(v) for name, v in series.items()}


# ---------------------------------------------------------------------------
# Hölder-type moment diagnostics


@dataclass(frozen=True)
class HolderReport:
    estimates: tuple  # ((lag, estimate), ...)
    fit: SlopeFit | None

    @property
    def slope(self) -> float:
        return self.fit.slope if self.fit is not None else float("nan")


def window_pairs(grid: TimeGrid, lag: float, stride: float | None = None, horizon: float | None = None):
    """Grid pairs ``(s, s + lag)`` inside ``[0, horizon]``, ``s`` stepping by ``stride``."""
    k_lag = grid.index_of(lag)
    k_stride = k_lag if stride is None else grid.index_of(stride)
    k_end = grid.steps if horizon is None else grid.index_of(horizon)
    if k_lag < 1 or k_stride < 1:
        raise ValueError("lag misaligned: lag must be at least one grid step")
    return [(s / grid.n, (s + k_lag) / grid.n) for s in range(0, k_end - k_lag + 1, k_stride)]


def _pair_indices(grid, pairs):
    out = []
    for s, t in pairs:
        ks, kt = grid.index_of(s), grid.index_of(t)
        if kt <= ks or (t - s) > 1.0 + 1e-12:
            raise ValueError(f"lag misaligned: need s < t with t - s <= 1, got ({s}, {t})")
        out.append((ks, kt))
    return out


def holder_moment_estimate(ensemble: ParticleEnsemble, q: float, lags) -> list[tuple[float, float]]:
    """``E[sup_{s<=u<=t} |X_u - X_s|^q]`` averaged over particles, per ``(s, t)`` pair."""
    if q < 1:
        raise ValueError("q must be >= 1")
    grid = ensemble.grid
    out = []
    for (s, t), (ks, kt) in zip(lags, _pair_indices(grid, lags)):
        window = ensemble.paths[:, ks:kt + 1, :] - ensemble.paths[:, ks:ks + 1, :]
        dist = np.linalg.norm(window, axis=-1) if ensemble.d_x > 1 else np.abs(window[..., 0])
        out.append((t - s, float(np.mean(dist.max(axis=1) ** q))))
    return out


def _group_by_lag(estimates):
    acc: dict[float, list[float]] = {}
    for lag, val in estimates:
        acc.setdefault(round(lag, 12), []).append(val)
    return tuple((lag, float(np.mean(v))) for lag, v in sorted(acc.items()))


def _fit_if_positive(points):
    if len(points) >= 3 and all(v > 0 for _, v in points):
        return fit_loglog(points)
    return None


def holder_slope(ensembles, q: float, lag_lengths, horizon: float | None = None) -> HolderReport:
    """Average the sup-increment moment over disjoint windows (and ensembles) per lag; fit the slope."""
    if isinstance(ensembles, ParticleEnsemble):
        ensembles = [ensembles]
    raw = []
    for ens in ensembles:
        for lag in lag_lengths:
            raw.extend(holder_moment_estimate(ens, q, window_pairs(ens.grid, lag, horizon=horizon)))
    points = _group_by_lag(raw)
    return HolderReport(points, _fit_if_positive(points))


def wp_moment_estimates(law_path: ConditionalLawPath, p: float, lags, sliced: bool = False,
                        n_projections: int = 128, seed: int = 0) -> list[tuple[float, float]]:
    """``W_p^p(mu_t, mu_s)`` for each ``(s, t)`` pair of one common-noise realisation."""
    grid = law_path.grid
    d = law_path.paths.shape[2]
    N = law_path.paths.shape[0]
    if d > 1 and not sliced and N > ASSIGNMENT_LIMIT:
        raise ValueError("use sliced estimator: exact W_p in d > 1 is limited to small ensembles")
    out = []
    for (s, t), (ks, kt) in zip(lags, _pair_indices(grid, lags)):
        a, b = law_path.at(kt), law_path.at(ks)
        if d == 1:
            val = wasserstein_1d(a, b, p) ** p
        elif sliced:
            val = wasserstein_sliced(a, b, p, n_projections, seed) ** p
        else:
            val = ot_exact_small(a, b, PowerCost(p)).cost
        out.append((t - s, float(val)))
    return out


def wp_holder_check(law_paths, p: float, lags, **kwargs) -> HolderReport:
    """Slope of ``log E[W_p^p(mu_t, mu_s)]`` against ``log(t - s)``.

    ``law_paths`` is one flow or a list of flows from independent seeds;
    ``lags`` is a list of ``(s, t)`` pairs, averaged per lag length.
    """
    if not p > 2:
        raise ValueError("p must exceed 2")
    if isinstance(law_paths, ConditionalLawPath):
        law_paths = [law_paths]
    raw = []
    for lp in law_paths:
        raw.extend(wp_moment_estimates(lp, p, lags, **kwargs))
    points = _group_by_lag(raw)
    return HolderReport(points, _fit_if_positive(points))
