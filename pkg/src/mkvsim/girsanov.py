"""Change of measure, the coupling cost and the small-time contraction constant.

The drifted equation is recovered from the driftless one
``dX0 = sigma dW + rho dB`` by the exponential weight with integrand
``theta = sigma^{-1} b``. Weights are accumulated step by step in grid order,
so they do not depend on the thread count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .euler import ConditionalLawPath, ParticleEnsemble, simulate
from .measure import (ASSIGNMENT_LIMIT, EmpiricalMeasure, TransportPlan, scott_bin_width,
                      solve_assignment, tv_exact, tv_histogram)
from .model import CoefficientSpec, InitialCondition
from .noise import NoiseBundle, TimeGrid, make_grid, sample_bundle

ESS_FLOOR = 10.0
COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# driftless reference and exponential weights


def simulate_driftless(spec: CoefficientSpec, init: InitialCondition | None, grid: TimeGrid, N: int,
                       seed: int, bundle: NoiseBundle | None = None, xi=None,
                       threads: int | None = None) -> ParticleEnsemble:
    """Euler ensemble of ``dX0 = sigma dW + rho dB``; any drift of ``spec`` is dropped."""
    if {"sigma", "rho"} & set(spec.measure_dependent):
        raise ValueError("diffusion coefficients must not depend on the measure")
    ensemble, _ = simulate(spec.driftless(), init, grid, N, seed, bundle=bundle, xi=xi, threads=threads)
    return ensemble


@dataclass(frozen=True)
class GirsanovWeight:
    log_weights: np.ndarray = field(repr=False)
    theta_sup: float
    horizon_index: int

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def N(self) -> int:
        return len(self.log_weights)

    def rows(self):
        for i, lw in enumerate(self.log_weights):
            yield i, float(lw)


WEIGHTS_HEADER = ("particle", "log_weight")


def _solve_sigma(S: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``sigma^{-1} b`` with a conditioning check."""
    if S.shape[1] != S.shape[2]:
        raise ValueError("sigma not invertible: private diffusion is not square")
    if S.shape[1] == 1:
        s = S[:, 0, 0]
        if np.any(s == 0) or not np.all(np.isfinite(s)):
            raise ValueError("sigma not invertible")
        return b / s[:, None]
    if np.any(np.linalg.cond(S) > COND_LIMIT):
        raise ValueError("sigma not invertible")
    return np.linalg.solve(S, b[..., None])[..., 0]


def theta_values(spec: CoefficientSpec, t: float, x, m=None) -> np.ndarray:
    """``sigma^{-1}(t, x) b(t, x, m)`` for a batch of states."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    return _solve_sigma(np.asarray(spec.sigma(t, X, m)), np.asarray(spec.b(t, X, m)))


def doleans_weight(driftless: ParticleEnsemble, bundle: NoiseBundle | None, spec: CoefficientSpec,
                   law_path: ConditionalLawPath | None = None, T: float | None = None) -> GirsanovWeight:
    """Per-particle ``log E = sum theta . dW - 1/2 sum |theta|^2 dt`` up to the last grid time <= T.

    ``theta`` is evaluated at left grid points on the driftless paths; the
    measure argument comes from ``law_path`` (default: the driftless
    ensemble's own empirical law).
    """
    bundle = driftless.bundle if bundle is None else bundle
    grid = driftless.grid
    if bundle is None or bundle.N != driftless.N:
        raise ValueError("misaligned inputs: bundle does not match the ensemble")
    if spec.d_w != spec.d_x:
        raise ValueError("sigma not invertible: private diffusion is not square")
    k_end = grid.steps if T is None else min(int(grid.index_floor(T)), grid.steps)
    if law_path is None:
        law_path = ConditionalLawPath(driftless.paths, grid)
    dt = grid.dt
    log_w = np.zeros(driftless.N)
    sup = 0.0
    for j in range(k_end):
        X = driftless.paths[:, j, :] if spec.markovian else driftless.paths[:, : j + 1, :]
        m = law_path.at(j) if spec.markovian else law_path.history(j)
        theta = _solve_sigma(np.asarray(spec.sigma(grid.times[j], X, m)),
                             np.asarray(spec.b(grid.times[j], X, m)))
        log_w += np.sum(theta * bundle.idio_increments[:, j, :], axis=1) - 0.5 * np.sum(theta ** 2, axis=1) * dt
        sup = max(sup, float(np.max(np.linalg.norm(theta, axis=1))))
    if not np.all(np.isfinite(log_w)):
        raise FloatingPointError("non-finite log-weight")
    log_w.setflags(write=False)
    return GirsanovWeight(log_w, sup, k_end)


def _normalised(weights) -> np.ndarray:
    lw = weights.log_weights if isinstance(weights, GirsanovWeight) else np.log(np.asarray(weights, dtype=float))
    w = np.exp(lw - lw.max())
    return w


def effective_sample_size(weights) -> float:
    """``sum w / max w``, the degeneracy measure used for the warning."""
    w = _normalised(weights)
    return float(w.sum())


def reweighted_expectation(weights, functional) -> float | np.ndarray:
    """Self-normalised estimate ``sum w f / sum w``."""
    w = _normalised(weights)
    f = np.asarray(functional, dtype=float)
    if f.shape[0] != len(w):
        raise ValueError("weights and functional are not index-aligned")
    if w.sum() < ESS_FLOOR:
        warnings.warn("weight degeneracy: effective sample size below 10", RuntimeWarning, stacklevel=2)
    out = np.tensordot(w, f, axes=(0, 0)) / w.sum()
    return float(out) if np.ndim(out) == 0 else out


def weighted_ks_distance(weights, x, y) -> float:
    """Sup distance between the weighted ECDF of ``x`` and the plain ECDF of ``y``."""
    w = _normalised(weights)
    x = np.asarray(x, dtype=float).ravel()
    y = np.sort(np.asarray(y, dtype=float).ravel())
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cw = np.concatenate([[0.0], np.cumsum(w[order])]) / w.sum()
    pts = np.union1d(xs, y)
    Fx = cw[np.searchsorted(xs, pts, side="right")]
    Fy = np.searchsorted(y, pts, side="right") / len(y)
    return float(np.max(np.abs(Fx - Fy)))


# ---------------------------------------------------------------------------
# contraction constant


@dataclass(frozen=True)
class ContractionParams:
    c_tv: float
    c_bdg: float = 2.0
    T: float = 1.0

    def __post_init__(self):
        if self.c_tv < 0 or not self.c_bdg > 0 or self.T < 0:
            raise ValueError("need c_tv >= 0, c_bdg > 0 and T >= 0")

    @property
    def alpha(self) -> float:
        return contraction_alpha(self.c_tv, self.c_bdg, self.T)


def contraction_alpha(c_tv: float, c_bdg: float, T: float) -> float:
    """``c_tv T + 4 (c_bdg c_tv sqrt(T) + c_tv^2 T / 2)``."""
    if c_tv < 0 or c_bdg < 0 or T < 0:
        raise ValueError("constants must be non-negative")
    return c_tv * T + 4.0 * (c_bdg * c_tv * math.sqrt(T) + 0.5 * c_tv * c_tv * T)


def solve_T(c_tv: float, c_bdg: float, target: float) -> float:
    """Largest ``T`` with ``alpha(T) <= target``: a quadratic in ``sqrt(T)``.

    Returns ``inf`` when ``c_tv = 0`` (alpha vanishes identically).
    """
    if c_tv < 0 or c_bdg < 0:
        raise ValueError("constants must be non-negative")
    if not 0 < target < 1:
        raise ValueError("target alpha must lie in (0, 1)")
    if c_tv == 0:
        return math.inf
    a = c_tv + 2.0 * c_tv * c_tv
    b = 4.0 * c_bdg * c_tv
    # cancellation-free root of a s^2 + b s - target = 0
    s = 2.0 * target / (b + math.sqrt(b * b + 4.0 * a * target))
    return s * s


# ---------------------------------------------------------------------------
# coupling cost


@dataclass(frozen=True)
class CouplingSample:
    """Particles of one run: state paths, noise paths and the shared-randomness tag per particle."""

    paths: np.ndarray = field(repr=False)   # [M, L, d_x]
    noise: np.ndarray = field(repr=False)   # [M, L, d_w]
    tags: tuple

    def __post_init__(self):
        if not (len(self.paths) == len(self.noise) == len(self.tags)):
            raise ValueError("paths, noise and tags must have the same length")

    def __len__(self) -> int:
        return len(self.tags)

    def take(self, order) -> CouplingSample:
        order = np.asarray(order)
        return CouplingSample(self.paths[order], self.noise[order], tuple(self.tags[i] for i in order))

    @classmethod
    def from_ensemble(cls, ensemble: ParticleEnsemble, indices=None, u=None) -> CouplingSample:
        """Tag = (run seed or ``u``, bytes of the common increments)."""
        bundle = ensemble.bundle
        if bundle is None:
            raise ValueError("ensemble carries no noise bundle")
        idx = np.arange(ensemble.N) if indices is None else np.asarray(indices)
        tag = (ensemble.seed if u is None else u, bundle.common_increments.tobytes())
        noise = bundle.idio_paths()[idx, : ensemble.paths.shape[1]]
        return cls(ensemble.paths[idx], noise, (tag,) * len(idx))


@dataclass(frozen=True)
class CouplingCostSpec:
    """``1{x1 != x2} + min(d(w1, w2), 1)`` on matching tags, ``inf`` otherwise.

    Paths count as equal when their sup-norm gap is below ``tol_eq``; ``d`` is
    the uniform metric over grid times.
    """

    tol_eq: float = 1e-9
    truncation: float = 1.0
    penalty: float = math.inf

    def __call__(self, z1, z2) -> float:
        (x1, w1, u1), (x2, w2, u2) = z1, z2
        if u1 != u2:
            return self.penalty
        mismatch = float(np.max(np.abs(np.asarray(x1) - np.asarray(x2))) >= self.tol_eq)
        dw = float(np.max(np.linalg.norm(np.atleast_2d(np.asarray(w1) - np.asarray(w2)), axis=-1)))
        return mismatch + min(dw, self.truncation)

    def pairwise(self, s1: CouplingSample, s2: CouplingSample) -> np.ndarray:
        M1, M2 = len(s1), len(s2)
        C = np.empty((M1, M2))
        for i in range(M1):
            gap = np.abs(s2.paths - s1.paths[i]).reshape(M2, -1).max(axis=1)
            dw = np.linalg.norm(s2.noise - s1.noise[i], axis=-1).max(axis=1)
            C[i] = (gap >= self.tol_eq) + np.minimum(dw, self.truncation)
            same = np.fromiter((t == s1.tags[i] for t in s2.tags), dtype=bool, count=M2)
            C[i, ~same] = self.penalty
        return C


def coupling_plan(run1: CouplingSample, run2: CouplingSample,
                  spec: CouplingCostSpec | None = None) -> TransportPlan:
    spec = CouplingCostSpec() if spec is None else spec
    if len(run1) != len(run2):
        raise ValueError("runs must have equal sample counts")
    if len(run1) > ASSIGNMENT_LIMIT:
        raise ValueError("instance too large for exact solver")
    if run1.paths.shape[1:] != run2.paths.shape[1:]:
        raise ValueError("paths must live on a common grid")
    return solve_assignment(spec.pairwise(run1, run2))


def coupling_cost_estimate(run1: CouplingSample, run2: CouplingSample,
                           spec: CouplingCostSpec | None = None) -> float:
    """Optimal-assignment value of the tagged cost between two runs."""
    return coupling_plan(run1, run2, spec).cost


# ---------------------------------------------------------------------------
# contraction experiment


def estimate_c_tv(spec: CoefficientSpec, probes) -> float:
    """Largest ``|theta(x, mu) - theta(x, nu)| / d_TV(mu, nu)`` over ``(t, x, mu, nu)`` probes."""
    worst = 0.0
    for t, x, mu, nu in probes:
        mu, nu = EmpiricalMeasure(mu), EmpiricalMeasure(nu)
        tv = tv_exact(mu, nu)
        if tv == 0:
            continue
        gap = np.linalg.norm(theta_values(spec, t, x, mu) - theta_values(spec, t, x, nu), axis=-1)
        worst = max(worst, float(gap.max()) / tv)
    return worst


CONTRACTION_HEADER = ("iteration", "time", "tv_distance", "alpha_bound")

MARGINAL_GAP_NOTE = ("distances are time-marginal histogram TV; the guarantee is stated for a "
                     "path-space transport cost, which this experiment does not evaluate")


@dataclass(frozen=True)
class ContractionReport:
    params: ContractionParams
    seeds: tuple
    times: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)  # [seeds, iterations + 1, times]
    bin_width: float
    note: str = MARGINAL_GAP_NOTE

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def sup_distances(self) -> np.ndarray:
        """Time-sup distance per seed and iteration, ``[seeds, iterations + 1]``."""
        return self.distances.max(axis=2)

    @property
    def ratios(self) -> np.ndarray:
        """Seed-pooled ratio ``sum_s D[s, k+1] / sum_s D[s, k]``; NaN where the denominator vanishes."""
        tot = self.sup_distances.sum(axis=0)
        out = np.full(len(tot) - 1, np.nan)
        ok = tot[:-1] > 0
        out[ok] = tot[1:][ok] / tot[:-1][ok]
        return out

    @property
    def max_ratio(self) -> float:
        r = self.ratios[np.isfinite(self.ratios)]
        return float(r.max()) if r.size else 0.0

    def rows(self):
        mean = self.distances.mean(axis=0)
        start = float(self.sup_distances[:, 0].mean())
        for k in range(mean.shape[0]):
            bound = start * self.alpha ** k
            for j, t in enumerate(self.times):
                yield k, float(t), float(mean[k, j]), bound


def tv_contraction_experiment(spec: CoefficientSpec, init: InitialCondition, grid: TimeGrid, N: int, seeds,
                              params: ContractionParams, iterations: int = 4, perturbation: float = 0.5,
                              bin_width: float | None = None, threads: int | None = None) -> ContractionReport:
    """Iterate the law-feedback map from two bootstraps sharing ``xi``, ``B`` and ``W``.

    Run 1 starts from the driftless flow of ``xi + perturbation``, run 2 from
    that of ``xi``. Each iteration re-simulates both with the drift evaluated
    along the previous flow, on the grid of step ``1/grid.n`` up to ``T``.
    """
    if params.alpha >= 1:
        raise ValueError(f"no contraction guarantee at this T (alpha = {params.alpha!r})")
    if not spec.markovian:
        raise ValueError("contraction experiment needs Markovian coefficients")
    if {"sigma", "rho"} & set(spec.measure_dependent):
        raise ValueError("diffusion coefficients must not depend on the measure")
    seeds = tuple(int(s) for s in seeds)
    g = make_grid(grid.n, params.T)
    driftless = spec.driftless()
    all_d = []
    width = bin_width
    for seed in seeds:
        bundle = sample_bundle(seed, g, N, spec.d_b, spec.d_w, threads=threads)
        xi = init.sample(seed, bundle.particle_ids, threads)
        if width is None:
            width = scott_bin_width(xi)
        flows = []
        for shift in (perturbation, 0.0):
            _, lp = simulate(driftless, None, g, N, seed, bundle=bundle, xi=xi + shift, threads=threads)
            flows.append(lp)
        per_iter = [_flow_distance(flows[0], flows[1], width)]
        for _ in range(iterations):
            flows = [simulate(spec, None, g, N, seed, bundle=bundle, xi=xi, measure_flow=f, threads=threads)[1]
                     for f in flows]
            per_iter.append(_flow_distance(flows[0], flows[1], width))
        all_d.append(per_iter)
    return ContractionReport(params, seeds, g.times.copy(), np.asarray(all_d), float(width))


def _flow_distance(f1: ConditionalLawPath, f2: ConditionalLawPath, width: float) -> np.ndarray:
    return np.array([tv_histogram(f1.at(k), f2.at(k), bin_width=width) for k in range(len(f1))])
