import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtri

from mkvsim.noise import (COMMON, STREAM_INCREMENTS, make_grid, normal_icdf, particle_normals,
                          sample_bundle, stream_normals)


class TestGrid:
    def test_unit_mesh(self):
        assert make_grid(2, 1.0).times.tolist() == [0.0, 0.5, 1.0]

    def test_coarse_mesh_covers_horizon(self):
        g = make_grid(1, 0.4)
        assert g.times.tolist() == [0.0, 1.0]
        assert g.steps == 1

    def test_kappa(self):
        assert make_grid(2, 1.0).kappa(0.7) == 0.5

    def test_empty_horizon(self):
        with pytest.raises(ValueError, match="empty horizon"):
            make_grid(4, 0.0)

    @given(st.integers(1, 64), st.floats(0.01, 5.0), st.floats(0.0, 1.0))
    def test_kappa_idempotent_and_floor(self, n, T, frac):
        g = make_grid(n, T)
        t = frac * T
        k = g.kappa(t)
        assert g.kappa(k) == k
        assert k <= t + 1e-9
        assert t - k < 1.0 / n + 1e-9
        assert g.times[-1] >= T - 1e-12
        assert np.allclose(np.diff(g.times), 1.0 / n)


class TestInverseCdf:
    def test_against_reference(self):
        u = np.concatenate([np.linspace(1e-12, 1e-3, 2000), np.linspace(1e-3, 1 - 1e-3, 20000),
                            1 - np.linspace(1e-12, 1e-3, 2000)])
        ref = ndtri(u)
        err = np.abs(normal_icdf(u) - ref) / np.maximum(1.0, np.abs(ref))
        assert err.max() < 1.15e-9

    def test_symmetry_and_median(self):
        u = np.linspace(0.01, 0.49, 50)
        assert np.allclose(normal_icdf(u), -normal_icdf(1 - u), atol=1e-9)
        assert abs(normal_icdf(np.array([0.5]))[0]) < 1e-15


class TestBundle:
    def test_same_seed_bit_identical(self):
        g = make_grid(16, 1.0)
        a, b = sample_bundle(7, g, 50), sample_bundle(7, g, 50)
        assert a.common_increments.tobytes() == b.common_increments.tobytes()
        assert a.idio_increments.tobytes() == b.idio_increments.tobytes()

    def test_different_seed_differs(self):
        g = make_grid(16, 1.0)
        assert not np.array_equal(sample_bundle(1, g, 5).idio_increments, sample_bundle(2, g, 5).idio_increments)

    def test_thread_count_invariance(self):
        g = make_grid(32, 1.0)
        a = sample_bundle(3, g, 1000, threads=1)
        b = sample_bundle(3, g, 1000, threads=7)
        assert a.idio_increments.tobytes() == b.idio_increments.tobytes()

    def test_increment_mean_clt(self):
        # 10^6 increments with dt = 0.01: mean within 3 sqrt(dt / M)
        g = make_grid(100, 1.0)
        b = sample_bundle(11, g, 10_000)
        inc = b.idio_increments.ravel()
        assert inc.size == 1_000_000
        assert abs(inc.mean()) < 3 * math.sqrt(0.01 / inc.size)

    def test_increment_variance(self):
        g = make_grid(100, 1.0)
        inc = sample_bundle(12, g, 2000).idio_increments.ravel()
        se = math.sqrt(2.0) * g.dt / math.sqrt(inc.size)
        assert abs(inc.var() - g.dt) < 5 * se

    def test_common_idiosyncratic_independence(self):
        g = make_grid(256, 1.0)
        b = sample_bundle(13, g, 4000)
        dB = b.common_increments[:, 0]
        dW = b.idio_increments[:, :, 0]
        cov = (dW * dB[None, :]).mean(axis=1)  # per-particle covariance estimate
        se = cov.std(ddof=1) / math.sqrt(len(cov))
        assert abs(cov.mean()) < 3 * se

    def test_path_reconstruction(self):
        b = sample_bundle(5, make_grid(8, 1.0), 3, d_B=2)
        B = b.common_path()
        assert np.all(B[0] == 0)
        assert np.allclose(np.diff(B, axis=0), b.common_increments, atol=1e-15)
        assert np.all(b.idio_paths()[:, 0] == 0)

    def test_permuting_particles_permutes_streams(self):
        g = make_grid(8, 1.0)
        ids = np.array([4, 0, 9, 2])
        a = sample_bundle(21, g, 4, particle_ids=ids)
        b = sample_bundle(21, g, 4, particle_ids=ids[::-1])
        assert np.array_equal(a.idio_increments, b.idio_increments[::-1])
        assert np.array_equal(a.common_increments, b.common_increments)

    def test_stream_position_addressing(self):
        # increment (i, k, j) is a pure function of its stream position
        whole = stream_normals(9, STREAM_INCREMENTS, 3, 0, 40)
        for start in (1, 5, 17, 33):
            part = stream_normals(9, STREAM_INCREMENTS, 3, start, 40 - start)
            assert np.array_equal(part, whole[start:])

    def test_common_sentinel_distinct_from_particles(self):
        c = stream_normals(0, STREAM_INCREMENTS, COMMON, 0, 8)
        p = particle_normals(0, STREAM_INCREMENTS, np.arange(3), 0, 8)
        assert not any(np.array_equal(c, row) for row in p)

    def test_shared_common_seed(self):
        g = make_grid(8, 1.0)
        a = sample_bundle(1, g, 4, common_seed=99)
        b = sample_bundle(2, g, 4, common_seed=99)
        assert np.array_equal(a.common_increments, b.common_increments)
        assert not np.array_equal(a.idio_increments, b.idio_increments)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 63 - 1))
    def test_any_64bit_seed(self, seed):
        b = sample_bundle(seed, make_grid(4, 1.0), 2)
        assert np.all(np.isfinite(b.idio_increments))

    def test_read_only(self):
        b = sample_bundle(0, make_grid(4, 1.0), 2)
        with pytest.raises(ValueError):
            b.idio_increments[0, 0, 0] = 1.0
