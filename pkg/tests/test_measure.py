import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from mkvsim.measure import (EmpiricalMeasure, PowerCost, TransportPlan, ot_exact_small, solve_assignment,
                            tv_exact, tv_histogram, wasserstein_1d, wasserstein_sliced)


def brute_assignment(C):
    M = len(C)
    return min(np.mean([C[i, p[i]] for i in range(M)]) for p in itertools.permutations(range(M)))


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestEmpiricalMeasure:
    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="degenerate measure"):
            EmpiricalMeasure(np.zeros((0, 1)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            EmpiricalMeasure([0.0, np.nan])

    def test_path_marginal(self):
        m = EmpiricalMeasure(np.arange(12.0).reshape(2, 3, 2))
        assert m.is_path
        assert np.array_equal(m.marginal(1).atoms, [[2.0, 3.0], [8.0, 9.0]])
        assert np.array_equal(m.points(), m.marginal().atoms)


class TestWasserstein1d:
    def test_identity(self, rng):
        x = rng.normal(size=20)
        assert wasserstein_1d(x, x, 2) == 0.0

    def test_single_atom(self):
        assert wasserstein_1d([0.0], [1.0], 1) == 1.0

    def test_two_atoms(self):
        assert wasserstein_1d([0.0, 1.0], [0.0, 3.0], 1) == pytest.approx(1.0, abs=1e-15)

    def test_order_below_one(self):
        with pytest.raises(ValueError, match="not a metric order"):
            wasserstein_1d([0.0], [1.0], 0.5)

    def test_unequal_sizes_via_replication(self, rng):
        # replicating atoms does not change the measure, so the merged-quantile value must match
        a, b = rng.normal(size=3), rng.normal(size=2)
        exact = wasserstein_1d(np.repeat(a, 2), np.repeat(b, 3), 2)
        assert wasserstein_1d(a, b, 2) == pytest.approx(exact, rel=1e-12)

    @pytest.mark.slow
    def test_matches_assignment(self, rng):
        for _ in range(200):
            M = rng.integers(1, 9)
            p = rng.choice([1.0, 1.5, 2.0, 3.0])
            a, b = rng.normal(size=M), rng.normal(size=M)
            C = np.abs(a[:, None] - b[None, :]) ** p
            assert wasserstein_1d(a, b, p) == pytest.approx(brute_assignment(C) ** (1 / p), abs=1e-9)

    @settings(max_examples=60)
    @given(arrays(float, 6, elements=finite), arrays(float, 6, elements=finite), arrays(float, 6, elements=finite))
    def test_metric_axioms(self, a, b, c):
        ab, bc, ac = (wasserstein_1d(x, y, 2) for x, y in ((a, b), (b, c), (a, c)))
        assert ab == wasserstein_1d(b, a, 2)
        assert ac <= ab + bc + 1e-9


class TestAssignment:
    def test_diagonal_zero(self, rng):
        x = rng.normal(size=(7, 2))
        plan = ot_exact_small(x, x[::-1], lambda u, v: float(np.any(u != v)))
        assert plan.cost == 0.0

    def test_against_enumeration(self, rng):
        for _ in range(300):
            M = rng.integers(1, 7)
            C = rng.exponential(size=(M, M))
            assert solve_assignment(C).cost == pytest.approx(brute_assignment(C), abs=1e-12)

    def test_against_scipy_large(self, rng):
        for M in (17, 64, 200):
            C = rng.random((M, M))
            r, c = linear_sum_assignment(C)
            assert solve_assignment(C).cost == pytest.approx(C[r, c].mean(), abs=1e-12)

    def test_all_forbidden(self):
        assert solve_assignment(np.full((3, 3), np.inf)).cost == math.inf

    def test_forbidden_avoided_when_possible(self, rng):
        C = rng.random((5, 5)) * 100
        C[np.eye(5, dtype=bool)] = np.inf
        plan = solve_assignment(C)
        assert np.isfinite(plan.cost)
        assert np.all(plan.pairing != np.arange(5))

    def test_infeasible_structure(self):
        C = np.array([[1.0, np.inf], [2.0, np.inf]])
        assert solve_assignment(C).cost == math.inf

    def test_too_large(self):
        with pytest.raises(ValueError, match="instance too large for exact solver"):
            ot_exact_small(np.zeros(257), np.zeros(257), PowerCost(1))

    def test_plan_invariants(self, rng):
        C = rng.random((9, 9))
        plan = solve_assignment(C)
        pi = plan.coupling()
        assert np.allclose(pi.sum(axis=0), 1 / 9) and np.allclose(pi.sum(axis=1), 1 / 9)
        assert abs(plan.cost - plan.objective()) <= 1e-12
        assert abs(plan.cost - float((pi * C).sum())) <= 1e-12

    def test_relabel_invariance(self, rng):
        a, b = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
        base = ot_exact_small(a, b, PowerCost(1)).cost
        perm = rng.permutation(12)
        assert ot_exact_small(a[perm], b[rng.permutation(12)], PowerCost(1)).cost == pytest.approx(base, abs=1e-12)

    def test_one_d_equivalence(self, rng):
        for M in (5, 33, 64):
            a, b = rng.normal(size=M), rng.normal(size=M) + 0.3
            assert ot_exact_small(a, b, PowerCost(2)).cost ** 0.5 == pytest.approx(wasserstein_1d(a, b, 2), abs=1e-9)

    def test_triangle_inequality(self, rng):
        for _ in range(50):
            a, b, c = (rng.normal(size=(6, 2)) for _ in range(3))
            d = lambda x, y: ot_exact_small(x, y, PowerCost(1)).cost
            assert d(a, c) <= d(a, b) + d(b, c) + 1e-9

    def test_path_ground_metric_is_uniform(self):
        x = np.zeros((1, 3, 1))
        y = np.array([[[0.0], [2.0], [-1.0]]])
        assert PowerCost(1).pairwise(x, y)[0, 0] == 2.0


class TestSliced:
    def test_identity(self, rng):
        x = rng.normal(size=(30, 3))
        assert wasserstein_sliced(x, x, 1, 64, seed=1) == 0.0

    def test_unit_translation_angular_average(self, rng):
        x = rng.normal(size=(200, 2))
        val = wasserstein_sliced(x, x + np.array([1.0, 0.0]), 1, 10_000, seed=3)
        assert abs(val - 2 / math.pi) < 0.02

    def test_deterministic(self, rng):
        a, b = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        assert wasserstein_sliced(a, b, 2, 50, seed=4) == wasserstein_sliced(a, b, 2, 50, seed=4)

    def test_close_to_exact(self, rng):
        a, b = rng.normal(size=(64, 2)), rng.normal(size=(64, 2)) + np.array([1.0, 0.5])
        exact = ot_exact_small(a, b, PowerCost(1)).cost
        sliced = wasserstein_sliced(a, b, 1, 2000, seed=0)
        # a projection never increases distances, so the sliced value sits below the exact one
        assert sliced <= exact + 1e-12

    def test_close_to_exact_rescaled(self, rng):
        # sliced W_1 of a d=2 cloud is shrunk by the angular factor 2/pi for translations
        a = rng.normal(size=(64, 2))
        b = rng.normal(size=(64, 2)) + np.array([3.0, 0.0])
        exact = ot_exact_small(a, b, PowerCost(1)).cost
        sliced = wasserstein_sliced(a, b, 1, 4000, seed=0) * math.pi / 2
        assert abs(sliced - exact) / exact < 0.15


class TestTv:
    def test_identical(self, rng):
        x = rng.normal(size=50)
        assert tv_histogram(x, x, 0.3) == 0.0

    def test_disjoint(self):
        assert tv_histogram([0.0, 0.1], [5.0, 5.2], 0.5) == 1.0

    def test_hand_counts(self):
        assert tv_histogram([0, 0, 1, 1], [0, 1, 1, 1], 0.5) == pytest.approx(0.25, abs=1e-15)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            tv_histogram([0.0], [1.0], 0.0)

    def test_clipping_warns(self):
        with pytest.warns(RuntimeWarning, match="clipped"):
            val = tv_histogram([0.0, 3.0], [0.0, 1.0], 1.0, box=(0.0, 1.0))
        assert val == 0.0  # 3.0 lands on the box edge, in the same cell as 1.0

    def test_lattice_anchored_at_origin(self):
        # both samples share cell [0, 1): distance 0 whatever the data minimum
        assert tv_histogram([0.2], [0.9], 1.0) == 0.0
        assert tv_histogram([0.9], [1.1], 1.0) == 1.0

    @settings(max_examples=60)
    @given(arrays(float, (8, 2), elements=finite), arrays(float, (5, 2), elements=finite),
           st.floats(0.05, 5.0))
    def test_range(self, a, b, w):
        v = tv_histogram(a, b, w)
        assert 0.0 <= v <= 1.0
        assert v == tv_histogram(b, a, w)

    def test_exact_discrete(self):
        assert tv_exact([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(0.25)
        assert tv_exact([[1, 2]], [[1, 2]]) == 0.0
