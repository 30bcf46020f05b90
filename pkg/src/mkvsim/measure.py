"""Empirical measures and the distances used by the diagnostics.

All measures are uniform over a finite list of atoms. Atoms are either points
(``[M, d]``) or discrete paths on a time grid (``[M, L, d]``); for path atoms
the ground distance is the uniform metric over grid points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .noise import STREAM_AUX, stream_normals

ASSIGNMENT_LIMIT = 256


class EmpiricalMeasure:
    """Uniform probability measure on a finite set of atoms."""

    __slots__ = ("atoms",)

    def __init__(self, atoms):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim not in (2, 3):
            raise ValueError("atoms must have shape [M, d] or [M, L, d]")
        if atoms.shape[0] == 0:
            raise ValueError("degenerate measure")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("non-finite atom")
        self.atoms = atoms

    def __len__(self) -> int:
        return self.atoms.shape[0]

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(M={len(self)}, shape={self.atoms.shape[1:]})"

    @property
    def dim(self) -> int:
        return self.atoms.shape[-1]

    @property
    def is_path(self) -> bool:
        return self.atoms.ndim == 3

    def marginal(self, k: int = -1) -> EmpiricalMeasure:
        """Time-``k`` marginal of a path measure (a point measure is returned as is)."""
        if not self.is_path:
            return self
        return EmpiricalMeasure(self.atoms[:, k, :])

    def points(self) -> np.ndarray:
        """Atoms of the current-time marginal, shape ``[M, d]``."""
        return self.atoms[:, -1, :] if self.is_path else self.atoms

    def integrate(self, f) -> np.ndarray:
        """``<m, f>`` for a vectorised ``f: [M, d] -> [M, ...]``."""
        return np.mean(f(self.points()), axis=0)

    def mean(self) -> np.ndarray:
        return self.points().mean(axis=0)

    def var(self) -> np.ndarray:
        return self.points().var(axis=0)


def _as_measure(m) -> EmpiricalMeasure:
    return m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m)


def _check_order(p: float) -> None:
    if not p >= 1:
        raise ValueError("not a metric order: p must be >= 1")


def wasserstein_1d(a, b, p: float = 1.0) -> float:
    """Exact ``W_p`` between two one-dimensional empirical measures.

    Equal sizes use the sorted matching. Unequal sizes integrate the distance
    between the two quantile functions over the merged breakpoints, which is
    still exact.
    """
    _check_order(p)
    a, b = _as_measure(a), _as_measure(b)
    if a.dim != 1 or b.dim != 1 or a.is_path or b.is_path:
        raise ValueError("wasserstein_1d needs one-dimensional point measures")
    xa = np.sort(a.atoms[:, 0])
    xb = np.sort(b.atoms[:, 0])
    if len(xa) == len(xb):
        gaps = np.abs(xa - xb)
        weights = None
    else:
        cuts = np.union1d(np.arange(len(xa) + 1) / len(xa), np.arange(len(xb) + 1) / len(xb))
        mid = 0.5 * (cuts[:-1] + cuts[1:])
        ia = np.minimum((mid * len(xa)).astype(int), len(xa) - 1)
        ib = np.minimum((mid * len(xb)).astype(int), len(xb) - 1)
        gaps = np.abs(xa[ia] - xb[ib])
        weights = np.diff(cuts)
    if np.isinf(p):
        return float(gaps.max())
    if weights is None:
        return float(np.mean(gaps ** p) ** (1.0 / p))
    return float(np.sum(weights * gaps ** p) ** (1.0 / p))


@dataclass(frozen=True)
class TransportPlan:
    """Optimal pairing ``row i -> column pairing[i]`` with mean cost ``cost``."""

    pairing: np.ndarray
    cost: float
    cost_matrix: np.ndarray = field(repr=False)

    def coupling(self) -> np.ndarray:
        """Doubly-stochastic coupling matrix with uniform marginals."""
        M = len(self.pairing)
        pi = np.zeros((M, M))
        pi[np.arange(M), self.pairing] = 1.0 / M
        return pi

    def objective(self) -> float:
        return float(self.cost_matrix[np.arange(len(self.pairing)), self.pairing].mean())


def _hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a finite square matrix.

    Shortest augmenting path with row/column potentials, ``O(M^3)``. Returns
    ``col[i]`` for each row ``i``.
    """
    M = cost.shape[0]
    u = np.zeros(M + 1)
    v = np.zeros(M + 1)
    owner = np.zeros(M + 1, dtype=int)  # owner[j]: 1-based row matched to column j
    way = np.zeros(M + 1, dtype=int)
    for i in range(1, M + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(M + 1, np.inf)
        used = np.zeros(M + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            cols = np.flatnonzero(used)
            u[owner[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(M, dtype=int)
    col[owner[1:] - 1] = np.arange(M)
    return col


def solve_assignment(cost_matrix) -> TransportPlan:
    """Optimal uniform-weight coupling for a square cost matrix.

    ``+inf`` marks forbidden pairs. They are replaced by a sentinel exceeding
    any all-finite assignment, and a plan that still uses one reports
    ``cost = inf``.
    """
    C = np.array(cost_matrix, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("cost matrix must be square")
    M = C.shape[0]
    if M > ASSIGNMENT_LIMIT:
        raise ValueError("instance too large for exact solver")
    if np.any(np.isnan(C)) or np.any(C < 0):
        raise ValueError("costs must be non-negative")
    forbidden = np.isinf(C)
    work = C.copy()
    if forbidden.any():
        finite = C[~forbidden]
        top = finite.max() if finite.size else 0.0
        work[forbidden] = M * top + 1.0
    pairing = _hungarian(work)
    chosen = C[np.arange(M), pairing]
    total = np.inf if np.any(np.isinf(chosen)) else float(chosen.mean())
    pairing.setflags(write=False)
    return TransportPlan(pairing, total, C)


class PowerCost:
    """``|x - y|^p`` with the Euclidean norm (uniform norm over grid points for paths)."""

    def __init__(self, p: float = 1.0):
        self.p = p

    def __call__(self, x, y) -> float:
        return float(self.pairwise(np.asarray(x)[None], np.asarray(y)[None])[0, 0])

    def pairwise(self, X, Y) -> np.ndarray:
        diff = X[:, None] - Y[None, :]
        if diff.ndim == 4:
            dist = np.linalg.norm(diff, axis=-1).max(axis=-1)
        else:
            dist = np.linalg.norm(diff, axis=-1)
        return dist ** self.p


def cost_matrix(a, b, cost) -> np.ndarray:
    A, B = _as_measure(a).atoms, _as_measure(b).atoms
    if hasattr(cost, "pairwise"):
        return np.asarray(cost.pairwise(A, B), dtype=float)
    return np.array([[cost(x, y) for y in B] for x in A], dtype=float)


def ot_exact_small(a, b, cost) -> TransportPlan:
    """Exact optimal transport between two equal-size empirical measures."""
    a, b = _as_measure(a), _as_measure(b)
    if len(a) != len(b):
        raise ValueError("ot_exact_small needs equal atom counts")
    if len(a) > ASSIGNMENT_LIMIT:
        raise ValueError("instance too large for exact solver")
    return solve_assignment(cost_matrix(a, b, cost))


def random_directions(d: int, count: int, seed: int) -> np.ndarray:
    """``count`` unit vectors in ``R^d``, uniform on the sphere, seeded."""
    g = stream_normals(seed, STREAM_AUX, 0, 0, count * d).reshape(count, d)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def wasserstein_sliced(a, b, p: float = 1.0, n_projections: int = 256, seed: int = 0) -> float:
    """Mean over random directions of the 1-D ``W_p`` of projected atoms."""
    _check_order(p)
    a, b = _as_measure(a), _as_measure(b)
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    theta = random_directions(a.dim, n_projections, seed)
    pa = a.points() @ theta.T
    pb = b.points() @ theta.T
    if len(a) != len(b):
        vals = [wasserstein_1d(pa[:, k], pb[:, k], p) for k in range(n_projections)]
        return float(np.mean(vals))
    gaps = np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0))
    if np.isinf(p):
        return float(gaps.max(axis=0).mean())
    return float(np.mean(np.mean(gaps ** p, axis=0) ** (1.0 / p)))


def scott_bin_width(atoms) -> float:
    """Scott's rule, taking the smallest per-dimension width."""
    X = _as_measure(atoms).points()
    M, d = X.shape
    sd = X.std(axis=0, ddof=1) if M > 1 else np.zeros(d)
    sd = sd[sd > 0]
    if sd.size == 0:
        return 1.0
    return float(3.49 * sd.min() * M ** (-1.0 / (d + 2)))


def tv_histogram(a, b, bin_width: float | None = None, box=None) -> float:
    """Histogram estimate of the total-variation distance, in ``[0, 1]``.

    Cells are cubes of side ``bin_width`` anchored at the lower corner of
    ``box``. Without a box the lattice is ``bin_width * Z^d``, so cell
    boundaries do not move with the data. Atoms outside a user box are
    clipped onto it with a warning.
    """
    a, b = _as_measure(a), _as_measure(b)
    A, B = a.points(), b.points()
    if A.shape[1] != B.shape[1]:
        raise ValueError("dimension mismatch")
    if bin_width is None:
        bin_width = scott_bin_width(np.vstack([A, B]))
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    both = np.vstack([A, B])
    if box is None:
        lo = np.floor(both.min(axis=0) / bin_width) * bin_width
        hi = both.max(axis=0)
    else:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (A.shape[1],)) for v in box)
        if np.any(both < lo) or np.any(both > hi):
            warnings.warn("atoms outside the histogram box were clipped", RuntimeWarning, stacklevel=2)
            A, B = np.clip(A, lo, hi), np.clip(B, lo, hi)
    shape = np.floor((hi - lo) / bin_width).astype(np.int64) + 1

    def cells(X):
        idx = np.minimum(np.floor((X - lo) / bin_width).astype(np.int64), shape - 1)
        return np.ravel_multi_index(idx.T, shape) if len(shape) > 1 else idx[:, 0]

    ca, cb = cells(A), cells(B)
    keys, inv = np.unique(np.concatenate([ca, cb]), return_inverse=True)
    fa = np.bincount(inv[: len(ca)], minlength=len(keys)) / len(ca)
    fb = np.bincount(inv[len(ca):], minlength=len(keys)) / len(cb)
    return float(min(1.0, 0.5 * np.abs(fa - fb).sum()))


def tv_exact(a, b) -> float:
    """Exact total variation between two discrete uniform measures (atom multisets)."""
    a, b = _as_measure(a), _as_measure(b)
    A = a.atoms.reshape(len(a), -1)
    B = b.atoms.reshape(len(b), -1)
    keys, inv = np.unique(np.vstack([A, B]), axis=0, return_inverse=True)
    inv = inv.ravel()
    fa = np.bincount(inv[: len(A)], minlength=len(keys)) / len(A)
    fb = np.bincount(inv[len(A):], minlength=len(keys)) / len(B)
    return float(0.5 * np.abs(fa - fb).sum())
