"""Residual checks of the measure-valued SPDE and of the conditional Fubini identities.

The particle ensemble gives a finite-sample stand-in ``nu_k`` for the
conditional time-marginals. For a test function ``phi`` the residual

    r(t_k) = <nu_k, phi> - <nu_0, phi>
             - sum_{j<k} <nu_j, L phi> dt - sum_{j<k} <nu_j, grad phi . rho> dB_j

is computed with left-point sums, matching the frozen coefficients of the scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .euler import ConditionalLawPath, ParticleEnsemble
from .model import CoefficientSpec
from .noise import NoiseBundle


@dataclass(frozen=True)
class TestFunction:
    """``phi`` with analytic derivatives, all vectorised over rows of ``x``.

    ``value: [K, d] -> [K]``, ``gradient: [K, d] -> [K, d]``,
    ``hessian: [K, d] -> [K, d, d]``.
    """

    __test__ = False  # not a pytest class

    value: Callable
    gradient: Callable
    hessian: Callable
    bound: float
    name: str = "phi"

    def validate(self, probes, rel_tol: float = 1e-5, h: float = 1e-5) -> None:
        """Check derivatives against central differences; raise ``ValueError`` on mismatch."""
        X = np.atleast_2d(np.asarray(probes, dtype=float))
        d = X.shape[1]
        g = self.gradient(X)
        H = self.hessian(X)
        if np.abs(H - np.swapaxes(H, 1, 2)).max() > 1e-12:
            raise ValueError(f"{self.name}: hessian not symmetric")
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd = (self.value(X + e) - self.value(X - e)) / (2 * h)
            fd2 = (self.gradient(X + e) - self.gradient(X - e)) / (2 * h)
            scale = 1.0 + np.abs(g[:, j])
            if np.max(np.abs(fd - g[:, j]) / scale) > rel_tol:
                raise ValueError(f"{self.name}: gradient disagrees with finite differences")
            if np.max(np.abs(fd2 - H[:, :, j]) / (1.0 + np.abs(H[:, :, j]))) > rel_tol:
                raise ValueError(f"{self.name}: hessian disagrees with finite differences")

    def __add__(self, other: TestFunction) -> TestFunction:
        return self.combine(1.0, other, 1.0)

    def combine(self, a: float, other: TestFunction, b: float) -> TestFunction:
        return TestFunction(
            lambda x: a * self.value(x) + b * other.value(x),
            lambda x: a * self.gradient(x) + b * other.gradient(x),
            lambda x: a * self.hessian(x) + b * other.hessian(x),
            abs(a) * self.bound + abs(b) * other.bound,
            f"{a}*{self.name}+{b}*{other.name}",
        )


def coordinate(j: int = 0, d: int = 1) -> TestFunction:
    e = np.zeros(d)
    e[j] = 1.0
    return TestFunction(lambda x: x[:, j].copy(),
                        lambda x: np.broadcast_to(e, x.shape).copy(),
                        lambda x: np.zeros((len(x), d, d)),
                        np.inf, f"x{j + 1}")


def coordinate_squared(j: int = 0, d: int = 1) -> TestFunction:
    E = np.zeros((d, d))
    E[j, j] = 2.0

    def grad(x):
        g = np.zeros_like(x)
        g[:, j] = 2.0 * x[:, j]
        return g

    return TestFunction(lambda x: x[:, j] ** 2, grad,
                        lambda x: np.broadcast_to(E, (len(x), d, d)).copy(),
                        np.inf, f"x{j + 1}^2")


def sine(a=1.0, d: int = 1) -> TestFunction:
    """``sin(<a, x>)``."""
    a = np.broadcast_to(np.asarray(a, dtype=float), (d,)).copy()
    outer = np.outer(a, a)
    norm = float(np.linalg.norm(a))
    return TestFunction(lambda x: np.sin(x @ a),
                        lambda x: np.cos(x @ a)[:, None] * a,
                        lambda x: -np.sin(x @ a)[:, None, None] * outer,
                        max(1.0, norm, norm ** 2), "sin")


def gaussian_bump(d: int = 1) -> TestFunction:
    """``exp(-|x|^2)``."""
    eye = np.eye(d)

    def value(x):
        return np.exp(-np.sum(x ** 2, axis=1))

    def grad(x):
        return -2.0 * x * value(x)[:, None]

    def hess(x):
        v = value(x)[:, None, None]
        return v * (4.0 * x[:, :, None] * x[:, None, :] - 2.0 * eye)

    return TestFunction(value, grad, hess, 2.0, "exp(-|x|^2)")


LIBRARY = {"x": coordinate, "x2": coordinate_squared, "sin": sine, "bump": gaussian_bump}


def test_function(name: str, d: int = 1) -> TestFunction:
    try:
        return LIBRARY[name](d=d)
    except KeyError:
        raise ValueError(f"unknown test function {name!r}; choose from {sorted(LIBRARY)}") from None


test_function.__test__ = False  # a factory, not a pytest test


def _generator_parts(spec: CoefficientSpec, phi: TestFunction, t, X, m):
    grad = phi.gradient(X)
    hess = phi.hessian(X)
    S = spec.sigma(t, X, m)
    R = spec.rho(t, X, m)
    drift = np.sum(spec.b(t, X, m) * grad, axis=1)
    cov = S @ np.swapaxes(S, 1, 2) + R @ np.swapaxes(R, 1, 2)
    trace = 0.5 * np.einsum("kij,kji->k", cov, hess)
    db = np.einsum("ki,kij->kj", grad, R)
    return drift, trace, db


def apply_generator(spec: CoefficientSpec, phi: TestFunction, t: float, x, m=None):
    """``L phi = b . grad phi + 1/2 tr((sigma sigma^T + rho rho^T) hess phi)``."""
    if not spec.markovian:
        raise ValueError("generator requires Markovian coefficients")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    drift, trace, _ = _generator_parts(spec, phi, t, X, m)
    out = drift + trace
    return float(out[0]) if single else out


@dataclass(frozen=True)
class SpdeResidualReport:
    phi: str
    times: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)
    phi_change: np.ndarray = field(repr=False)
    drift_term: np.ndarray = field(repr=False)
    trace_term: np.ndarray = field(repr=False)
    db_term: np.ndarray = field(repr=False)

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def rows(self):
        for k, t in enumerate(self.times):
            yield (float(t), self.phi, float(self.residual[k]), float(self.drift_term[k]),
                   float(self.trace_term[k]), float(self.db_term[k]))


RESIDUAL_HEADER = ("time", "phi_id", "residual", "drift_term", "trace_term", "db_term")


def _cumulative(increments: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(increments)])


def spde_residual(ensemble: ParticleEnsemble, law_path: ConditionalLawPath, spec: CoefficientSpec,
                  phi: TestFunction, bundle: NoiseBundle | None = None) -> SpdeResidualReport:
    if not spec.markovian:
        raise ValueError("generator requires Markovian coefficients")
    bundle = ensemble.bundle if bundle is None else bundle
    K = len(law_path) - 1
    if (bundle is None or bundle.grid.steps < K or law_path.paths.shape[0] != bundle.N
            or law_path.grid.n != bundle.grid.n):
        raise ValueError("misaligned inputs")
    dt = law_path.grid.dt
    drift_inc = np.empty(K)
    trace_inc = np.empty(K)
    db_inc = np.empty(K)
    for k in range(K):
        m = law_path.at(k)
        X = m.points()
        drift, trace, db = _generator_parts(spec, phi, law_path.times[k], X, m)
        drift_inc[k] = drift.mean() * dt
        trace_inc[k] = trace.mean() * dt
        db_inc[k] = float(db.mean(axis=0) @ bundle.common_increments[k])
    values = np.array([phi.value(law_path.paths[:, k, :]).mean() for k in range(K + 1)])
    change = values - values[0]
    drift_t, trace_t, db_t = _cumulative(drift_inc), _cumulative(trace_inc), _cumulative(db_inc)
    residual = change - drift_t - trace_t - db_t
    return SpdeResidualReport(phi.name, law_path.times.copy(), residual, change, drift_t, trace_t, db_t)


def _integrand_values(H, ensemble: ParticleEnsemble, bound: float) -> np.ndarray:
    steps = ensemble.paths.shape[1] - 1
    if callable(H):
        vals = np.stack([np.broadcast_to(np.asarray(H(ensemble.grid.times[j], ensemble.paths[:, : j + 1, :]),
                                                    dtype=float), (ensemble.N,))
                         for j in range(steps)], axis=1)
    else:
        vals = np.broadcast_to(np.asarray(H, dtype=float), (ensemble.N, steps))
    if not np.all(np.isfinite(vals)) or np.abs(vals).max() > bound:
        raise ValueError("integrand bound violated")
    return vals


def fubini_residual(ensemble: ParticleEnsemble, bundle: NoiseBundle | None, H, target: str = "dB",
                    bound: float = np.inf, coord: int = 0) -> np.ndarray:
    """Finite-sample residual of the conditional Fubini identities at every grid time.

    ``H`` is either an array ``[N, steps]`` of integrand values at left grid
    points, or ``H(t_j, history[N, j+1, d]) -> [N]``. For ``target='dW'`` the
    residual is the particle average of ``int H dW^i`` (zero in conditional
    mean); for ``'dB'`` it is the difference of the two sides of the
    interchange with the particle average as conditional expectation.
    """
    bundle = ensemble.bundle if bundle is None else bundle
    vals = _integrand_values(H, ensemble, bound)
    if target == "dW":
        inc = bundle.idio_increments[:, : vals.shape[1], coord]
        lhs = np.cumsum(vals * inc, axis=1).mean(axis=0)
        return np.concatenate([[0.0], lhs])
    if target == "dB":
        dB = bundle.common_increments[: vals.shape[1], coord]
        lhs = np.cumsum(vals * dB[None, :], axis=1).mean(axis=0)
        rhs = np.cumsum(vals.mean(axis=0) * dB)
        return np.concatenate([[0.0], lhs - rhs])
    raise ValueError("target must be 'dW' or 'dB'")
