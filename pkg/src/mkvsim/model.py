"""Coefficient triples (b, sigma, rho), interaction kernels and initial laws.

Coefficients are vectorised over particles: ``f(t, x, m)`` receives the
states ``x`` of shape ``[K, d_x]`` and an :class:`EmpiricalMeasure` ``m`` and
returns ``[K, d_x]`` (drift), ``[K, d_x, d_w]`` (private diffusion) or
``[K, d_x, d_b]`` (common diffusion). Row ``i`` of the output may depend on
row ``i`` of ``x`` and on ``m`` only.

Progressive (path-dependent) coefficients receive the discrete history
``[K, k+1, d_x]`` and the path measure instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure
from .noise import STREAM_INITIAL, particle_normals

MARKOVIAN = "closed_form_markovian"
KERNEL = "scalar_kernel"
PROGRESSIVE = "progressive"
FORMS = (MARKOVIAN, KERNEL, PROGRESSIVE)

_PAIR_BLOCK = 1 << 20


@dataclass(frozen=True)
class CoefficientSpec:
    drift: Callable
    diffusion_private: Callable
    diffusion_common: Callable
    d_x: int = 1
    d_w: int = 1
    d_b: int = 1
    form: str = MARKOVIAN
    bound: float = math.inf
    measure_dependent: frozenset = frozenset({"drift"})
    c_tv: float = math.inf  # TV-Lipschitz constant of sigma^{-1} b, when known
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown coefficient form {self.form!r}")

    @property
    def markovian(self) -> bool:
        return self.form != PROGRESSIVE

    def _args(self, x, m):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 or (x.ndim == 2 and not self.markovian)
        if single:
            x = x[None]
        if self.markovian:
            if x.ndim == 3:  # a path: only its current value matters
                x = x[:, -1, :]
            m = m.marginal() if m is not None and m.is_path else m
        return x, m, single

    def _call(self, f, t, x, m):
        x, m, single = self._args(x, m)
        out = np.asarray(f(t, x, m), dtype=float)
        return out[0] if single else out

    def b(self, t, x, m=None):
        return self._call(self.drift, t, x, m)

    def sigma(self, t, x, m=None):
        return self._call(self.diffusion_private, t, x, m)

    def rho(self, t, x, m=None):
        return self._call(self.diffusion_common, t, x, m)

    def with_drift(self, drift, measure_dependent=True, name=None) -> CoefficientSpec:
        dep = set(self.measure_dependent) - {"drift"}
        if measure_dependent:
            dep.add("drift")
        return CoefficientSpec(drift, self.diffusion_private, self.diffusion_common,
                               self.d_x, self.d_w, self.d_b, self.form, self.bound,
                               frozenset(dep), self.c_tv, name or self.name, dict(self.params))

    def driftless(self) -> CoefficientSpec:
        d = self.d_x
        return self.with_drift(lambda t, x, m: np.zeros((len(x), d)), measure_dependent=False,
                               name=f"{self.name}-driftless")


@dataclass(frozen=True)
class ScalarKernel:
    """Interaction kernel ``f~(t, x, y)``; integrated against ``m`` in ``y``.

    ``kernel(t, x, y)`` gets ``x`` of shape ``[K, 1, d]`` and ``y`` of shape
    ``[1, M, d]`` and returns values broadcastable to ``[K, M, *shape]``.
    """

    kernel: Callable
    bound: float
    shape: tuple = ()

    def __call__(self, t, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        K, M = len(x), len(y)
        res = np.asarray(self.kernel(t, x[:, None, :], y[None, :, :]), dtype=float)
        target = (K, M, *self.shape)
        if res.size == math.prod(target):
            return res.reshape(target)
        return np.broadcast_to(res, target)


def eval_kernel_coefficient(kernel: ScalarKernel, t: float, x, m: EmpiricalMeasure):
    """Empirical integral ``(1/M) sum_y f~(t, x, y)`` over the time-t atoms of ``m``."""
    if m is None or len(m) == 0:
        raise ValueError("degenerate measure")
    Y = m.points()
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    block = max(1, _PAIR_BLOCK // len(Y))
    out = []
    for lo in range(0, len(X), block):
        vals = kernel(t, X[lo:lo + block], Y)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("kernel overflow")
        out.append(vals.mean(axis=1))
    res = np.concatenate(out, axis=0)
    return res[0] if single else res


def jacobi_eigenvalues(G, tol: float = 1e-12, max_sweeps: int = 64) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations (ascending)."""
    A = np.array(G, dtype=float)
    n = A.shape[0]
    scale = max(1.0, np.abs(A).max())
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                tan = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(tan * tan + 1.0)
                s = tan * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                A = rot.T @ A @ rot
                A[p, q] = A[q, p] = 0.0
    return np.sort(np.diag(A))


def check_nondegeneracy(spec: CoefficientSpec, probes) -> float:
    """Smallest eigenvalue of ``Sigma Sigma^T`` over probes, ``Sigma = (sigma rho)``.

    Each probe is ``(t, x, m)`` with ``x`` one state or a batch of states.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("no probes")
    worst = math.inf
    for t, x, m in probes:
        X = np.asarray(x, dtype=float)
        X = X.reshape(1, -1) if X.ndim <= 1 else X
        S = np.concatenate([spec.sigma(t, X, m), spec.rho(t, X, m)], axis=2)
        for G in S @ np.swapaxes(S, 1, 2):
            if not np.abs(G - G.T).max() <= 1e-10:
                raise ArithmeticError("eigensolver input is not symmetric")
            worst = min(worst, float(jacobi_eigenvalues(0.5 * (G + G.T))[0]))
    return worst


def bump(r2):
    """Unnormalised bump ``exp(-1/(1-r^2))`` on the unit ball, zero outside."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def mollifier_nodes(d: int, quadrature_points: int):
    """Quadrature nodes ``(u, v)`` in ``R^d x R^d`` and unit-mass bump weights."""
    if quadrature_points < 2:
        raise ValueError("insufficient quadrature")
    z, w = np.polynomial.legendre.leggauss(quadrature_points)
    grids = np.meshgrid(*([z] * (2 * d)), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.ones(len(nodes))
    for axis_w in np.meshgrid(*([w] * (2 * d)), indexing="ij"):
        wts = wts * axis_w.ravel()
    wts = wts * bump(np.sum(nodes ** 2, axis=1))
    keep = wts > 0
    nodes, wts = nodes[keep], wts[keep]
    return nodes[:, :d], nodes[:, d:], wts / wts.sum()


def mollify_kernel(kernel: ScalarKernel, n: int, quadrature_points: int, d: int = 1) -> ScalarKernel:
    """Convolve ``f~`` in ``(x, y)`` with the bump scaled to radius ``1/n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    U, V, W = mollifier_nodes(d, quadrature_points)
    U, V = U / n, V / n

    def smoothed(t, x, y):
        K, M = x.shape[0], y.shape[1]
        acc = np.zeros((K, M, *kernel.shape))
        for u, v, w in zip(U, V, W):
            acc += w * kernel(t, x[:, 0, :] - u, y[0] - v)
        return acc

    return ScalarKernel(smoothed, kernel.bound, kernel.shape)


def sampled_bounds(spec: CoefficientSpec, probes) -> dict:
    """Largest observed ``|b|``, ``|sigma|``, ``|rho|`` (Frobenius) over probes."""
    out = {"drift": 0.0, "sigma": 0.0, "rho": 0.0}
    for t, x, m in probes:
        out["drift"] = max(out["drift"], float(np.max(np.linalg.norm(np.atleast_2d(spec.b(t, x, m)), axis=-1))))
        for key, f in (("sigma", spec.sigma), ("rho", spec.rho)):
            val = np.asarray(f(t, x, m))
            val = val.reshape(-1, spec.d_x * val.shape[-1])
            out[key] = max(out[key], float(np.max(np.linalg.norm(val, axis=-1))))
    return out


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True)
class InitialCondition:
    """Seeded law of ``xi``: ``sampler(seed, particle_ids) -> [K, dim]``."""

    sampler: Callable
    dim: int = 1
    moment_order: float = math.inf
    name: str = "custom"

    def sample(self, seed: int, particle_ids, threads=None) -> np.ndarray:
        ids = np.asarray(particle_ids)
        out = np.asarray(self.sampler(seed, ids, threads), dtype=float).reshape(len(ids), self.dim)
        return out

    def shifted(self, delta) -> InitialCondition:
        delta = np.asarray(delta, dtype=float)
        base = self.sampler
        return InitialCondition(lambda s, ids, th=None: base(s, ids, th) + delta,
                                self.dim, self.moment_order, f"{self.name}+shift")


def gaussian_initial(mean=0.0, var=1.0, dim: int = 1) -> InitialCondition:
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,))
    sd = np.sqrt(np.broadcast_to(np.asarray(var, dtype=float), (dim,)))

    def sampler(seed, ids, threads=None):
        z = particle_normals(seed, STREAM_INITIAL, ids, 0, dim, threads)
        return mean + sd * z

    return InitialCondition(sampler, dim, math.inf, "gaussian")


def dirac_initial(point=0.0, dim: int = 1) -> InitialCondition:
    point = np.broadcast_to(np.asarray(point, dtype=float), (dim,))
    return InitialCondition(lambda seed, ids, threads=None: np.tile(point, (len(ids), 1)),
                            dim, math.inf, "dirac")


# ---------------------------------------------------------------------------
# builtin coefficient families


def _matrix(value, rows, cols):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr * np.eye(rows, cols)
    return arr.reshape(rows, cols)


def _const(mat):
    def f(t, x, m):
        return np.broadcast_to(mat, (len(x), *mat.shape))
    return f


def constant_spec(b=0.0, sigma=0.0, rho=0.0, d: int = 1, d_w: int | None = None,
                  d_b: int | None = None) -> CoefficientSpec:
    d_w = d if d_w is None else d_w
    d_b = d if d_b is None else d_b
    bvec = np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy()
    S, R = _matrix(sigma, d, d_w), _matrix(rho, d, d_b)
    bound = max(np.linalg.norm(bvec), np.linalg.norm(S), np.linalg.norm(R))
    return CoefficientSpec(_const(bvec), _const(S), _const(R), d, d_w, d_b, MARKOVIAN,
                           float(bound), frozenset(), 0.0, "constant",
                           {"b": b, "sigma": sigma, "rho": rho})


def ou_conditional_mean(a=1.0, sigma=1.0, rho=0.0, d: int = 1) -> CoefficientSpec:
    """Mean reversion toward the conditional mean: ``b = a (mean(m_t) - x_t)``."""
    S, R = _matrix(sigma, d, d), _matrix(rho, d, d)

    def drift(t, x, m):
        return a * (m.mean() - x)

    return CoefficientSpec(drift, _const(S), _const(R), d, d, d, MARKOVIAN, math.inf,
                           frozenset({"drift"}), math.inf, "ou_conditional_mean",
                           {"a": a, "sigma": sigma, "rho": rho})


def kernel_spec(drift_kernel: ScalarKernel, sigma_kernel: ScalarKernel, rho_kernel: ScalarKernel,
                d: int = 1, d_w: int | None = None, d_b: int | None = None,
                name: str = "kernel") -> CoefficientSpec:
    """Scalar-interaction coefficients, each ``f(t,x,m) = mean_y f~(t,x,y)``."""
    d_w = d if d_w is None else d_w
    d_b = d if d_b is None else d_b
    shapes = {"drift": (d,), "sigma": (d, d_w), "rho": (d, d_b)}

    def lift(kern, key):
        if kern.shape != shapes[key]:
            kern = ScalarKernel(kern.kernel, kern.bound, shapes[key])

        def f(t, x, m):
            return eval_kernel_coefficient(kern, t, x, m)
        return f

    bound = max(drift_kernel.bound, sigma_kernel.bound, rho_kernel.bound)
    return CoefficientSpec(lift(drift_kernel, "drift"), lift(sigma_kernel, "sigma"),
                           lift(rho_kernel, "rho"), d, d_w, d_b, KERNEL, bound,
                           frozenset({"drift", "sigma", "rho"}), math.inf, name)


def kuramoto_kernel(kappa=0.5, sigma=1.0, rho=0.0) -> CoefficientSpec:
    """1-D drift ``kappa * mean_y sin(y - x)`` with constant diffusions.

    Evaluated in O(N) through ``sin(y-x) = sin y cos x - cos y sin x``; the
    kernel itself is in ``params['kernel']``. The kernel ranges over
    ``[-kappa, kappa]`` so ``sigma^{-1} b`` is TV-Lipschitz with ``2 kappa / sigma``.
    """
    S, R = _matrix(sigma, 1, 1), _matrix(rho, 1, 1)

    def drift(t, x, m):
        y = m.points()[:, 0]
        s, c = np.mean(np.sin(y)), np.mean(np.cos(y))
        return kappa * (s * np.cos(x) - c * np.sin(x))

    kern = ScalarKernel(lambda t, x, y: kappa * np.sin(y - x), abs(kappa), (1,))
    return CoefficientSpec(drift, _const(S), _const(R), 1, 1, 1, KERNEL,
                           float(max(abs(kappa), abs(sigma), abs(rho))), frozenset({"drift"}),
                           2.0 * abs(kappa) / abs(sigma) if sigma else math.inf, "kuramoto_kernel",
                           {"kappa": kappa, "sigma": sigma, "rho": rho, "kernel": kern})


def step_kernel(kappa=0.5, sigma=1.0, rho=0.0) -> CoefficientSpec:
    """1-D drift ``kappa * m(y > x)``: a bounded, discontinuous interaction kernel."""
    S, R = _matrix(sigma, 1, 1), _matrix(rho, 1, 1)

    def drift(t, x, m):
        y = np.sort(m.points()[:, 0])
        above = len(y) - np.searchsorted(y, x[:, 0], side="right")
        return (kappa * above / len(y))[:, None]

    kern = ScalarKernel(lambda t, x, y: kappa * (y > x), abs(kappa), (1,))
    return CoefficientSpec(drift, _const(S), _const(R), 1, 1, 1, KERNEL,
                           float(max(abs(kappa), abs(sigma), abs(rho))), frozenset({"drift"}),
                           abs(kappa) / abs(sigma) if sigma else math.inf, "step_kernel",
                           {"kappa": kappa, "sigma": sigma, "rho": rho, "kernel": kern})


REGISTRY = {
    "constant": (constant_spec, {"b": 0.0, "sigma": 0.0, "rho": 0.0, "d": 1}),
    "ou_conditional_mean": (ou_conditional_mean, {"a": 1.0, "sigma": 1.0, "rho": 0.0, "d": 1}),
    "kuramoto_kernel": (kuramoto_kernel, {"kappa": 0.5, "sigma": 1.0, "rho": 0.0}),
    "step_kernel": (step_kernel, {"kappa": 0.5, "sigma": 1.0, "rho": 0.0}),
}


def build_model(name: str, **params) -> CoefficientSpec:
    try:
        factory, defaults = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}") from None
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameter(s) for model {name!r}: {sorted(unknown)}")
    return factory(**{**defaults, **params})
