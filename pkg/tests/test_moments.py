import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvsim.moments import ReplicationError, fit_loglog, replicate
from mkvsim.noise import STREAM_AUX, stream_normals


class TestFit:
    def test_exact_power(self):
        x = np.array([0.1, 0.2, 0.4, 0.8])
        assert fit_loglog(list(zip(x, x ** 1.5))).slope == pytest.approx(1.5, abs=1e-12)

    def test_linear(self):
        fit = fit_loglog([(1, 2), (2, 4), (3, 6)])
        assert fit.slope == pytest.approx(1.0, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(2), abs=1e-12)
        assert max(abs(r) for r in fit.residuals) < 1e-12

    def test_noisy_sqrt(self, rng):
        x = np.geomspace(1e-3, 1, 12)
        y = x ** 0.5 * (1 + rng.uniform(-0.05, 0.05, size=x.size))
        assert abs(fit_loglog(list(zip(x, y))).slope - 0.5) < 0.05

    def test_needs_three_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            fit_loglog([(1, 1), (2, 2)])

    def test_positive_only(self):
        with pytest.raises(ValueError):
            fit_loglog([(1, 1), (2, 0), (3, 3)])

    @given(st.floats(1e-3, 1e3), st.lists(st.floats(0.1, 10), min_size=3, max_size=8, unique=True))
    def test_scaling_equivariance(self, c, ys):
        pts = [(i + 1.0, y) for i, y in enumerate(ys)]
        a = fit_loglog(pts)
        b = fit_loglog([(x, c * y) for x, y in pts])
        assert b.slope == pytest.approx(a.slope, abs=1e-12)
        assert b.intercept - a.intercept == pytest.approx(math.log(c), abs=1e-12)

    def test_predict(self):
        fit = fit_loglog([(1, 3), (2, 12), (4, 48)])
        assert fit.predict(3.0) == pytest.approx(27.0)


class TestReplicate:
    def test_constant(self):
        r = replicate(lambda s: 4.0, range(5))
        assert r.mean == 4.0 and r.stderr == 0.0

    def test_seed_values(self):
        assert replicate(float, [1, 2, 3]).mean == 2.0

    def test_seed_order_kept_with_threads(self):
        r = replicate(lambda s: s * 10, [5, 1, 3], threads=3)
        assert r.results == (50, 10, 30)

    def test_clt_grand_mean(self):
        def experiment(seed):
            return float(stream_normals(seed, STREAM_AUX, 7, 0, 10_000).mean())

        r = replicate(experiment, range(100))
        assert abs(r.mean) < 3e-3
        assert r.stderr == pytest.approx(1e-3, rel=0.3)

    def test_error_names_seed(self):
        def experiment(seed):
            if seed == 3:
                raise RuntimeError("boom")
            return seed

        with pytest.raises(ReplicationError, match="seed 3") as info:
            replicate(experiment, range(6))
        assert info.value.seed == 3

    def test_vector_results(self):
        r = replicate(lambda s: [s, 2 * s], [0, 2])
        assert np.array_equal(r.mean, [1.0, 2.0])

    def test_order_independence(self):
        a = replicate(lambda s: s ** 2, [1, 2, 3, 4])
        b = replicate(lambda s: s ** 2, [4, 3, 2, 1])
        assert a.mean == b.mean and a.stderr == pytest.approx(b.stderr, abs=1e-15)
