import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvsim.euler import simulate
from mkvsim.model import PROGRESSIVE, CoefficientSpec, constant_spec, gaussian_initial, ou_conditional_mean
from mkvsim.noise import make_grid
from mkvsim.spde import (LIBRARY, TestFunction, apply_generator, coordinate, coordinate_squared, fubini_residual,
                         gaussian_bump, sine, spde_residual, test_function)


class TestTestFunctions:
    @pytest.mark.parametrize("name", sorted(LIBRARY))
    @pytest.mark.parametrize("d", [1, 3])
    def test_library_derivatives(self, name, d, rng):
        test_function(name, d).validate(rng.normal(size=(20, d)))

    def test_wrong_gradient_rejected(self, rng):
        bad = TestFunction(lambda x: x[:, 0] ** 3, lambda x: 2 * x, lambda x: np.zeros((len(x), 1, 1)), 1.0)
        with pytest.raises(ValueError, match="gradient"):
            bad.validate(rng.normal(size=(5, 1)))

    def test_asymmetric_hessian_rejected(self, rng):
        f = gaussian_bump(2)
        bad = TestFunction(f.value, f.gradient, lambda x: f.hessian(x) + np.array([[0, 1.0], [0, 0]]), 2.0)
        with pytest.raises(ValueError, match="symmetric"):
            bad.validate(rng.normal(size=(5, 2)))

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            test_function("cosh")


class TestGenerator:
    def test_first_order(self):
        assert apply_generator(constant_spec(b=2.5), coordinate(), 0.0, [0.4]) == pytest.approx(2.5)

    def test_pure_trace(self):
        spec = constant_spec(sigma=0.6, rho=1.1)
        assert apply_generator(spec, coordinate_squared(), 0.0, [0.9]) == pytest.approx(0.36 + 1.21, abs=1e-14)

    def test_sine_at_origin(self):
        spec = constant_spec(b=1.0, sigma=1.0)
        assert apply_generator(spec, sine(), 0.0, [0.0]) == pytest.approx(1.0, abs=1e-15)

    def test_requires_markovian(self):
        spec = CoefficientSpec(lambda t, h, m: 0 * h[:, -1], lambda t, h, m: np.ones((len(h), 1, 1)),
                               lambda t, h, m: np.ones((len(h), 1, 1)), form=PROGRESSIVE)
        with pytest.raises(ValueError, match="generator requires Markovian coefficients"):
            apply_generator(spec, sine(), 0.0, [0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_phi(self, a, b):
        rng = np.random.default_rng(1)
        spec = constant_spec(b=[0.3, -0.2], sigma=[[1.0, 0.2], [0.0, 0.7]], rho=0.4, d=2)
        x = rng.normal(size=(8, 2))
        f, g = sine([1.0, 2.0], 2), gaussian_bump(2)
        lhs = apply_generator(spec, f.combine(a, g, b), 0.0, x)
        rhs = a * apply_generator(spec, f, 0.0, x) + b * apply_generator(spec, g, 0.0, x)
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestSpdeResidual:
    def test_static_measure(self):
        g = make_grid(16, 1.0)
        ens, law = simulate(constant_spec(), gaussian_initial(), g, 30, 0)
        for name in LIBRARY:
            assert np.all(spde_residual(ens, law, constant_spec(), test_function(name)).residual == 0.0)

    def test_constant_coefficients_identity(self):
        # for phi = x the residual is exactly s * mean_i W^i_t
        g = make_grid(32, 1.0)
        spec = constant_spec(b=0.7, sigma=1.3, rho=0.4)
        ens, law = simulate(spec, gaussian_initial(), g, 100, 3)
        rep = spde_residual(ens, law, spec, coordinate())
        W = ens.bundle.idio_paths()[:, :, 0].mean(axis=0)
        assert np.allclose(rep.residual, 1.3 * W, atol=1e-12)

    @pytest.mark.slow
    def test_constant_coefficients_clt(self):
        g = make_grid(32, 1.0)
        spec = constant_spec(b=0.7, sigma=1.3, rho=0.4)
        for N in (100, 2500):
            finals = []
            for seed in range(40):
                ens, law = simulate(spec, gaussian_initial(), g, N, seed)
                finals.append(spde_residual(ens, law, spec, coordinate()).residual[-1])
            # terminal residual ~ N(0, s^2 T / N)
            assert abs(np.mean(finals)) < 3 * 1.3 / math.sqrt(N * 40)
            assert np.std(finals) == pytest.approx(1.3 / math.sqrt(N), rel=0.35)

    def test_ou_mean_within_band(self):
        g = make_grid(64, 1.0)
        spec = ou_conditional_mean(1.0, 1.0, 0.5)
        N = 2000
        ens, law = simulate(spec, gaussian_initial(), g, N, 4)
        rep = spde_residual(ens, law, spec, coordinate())
        band = 3 * np.sqrt(g.times / N) + 1e-12
        assert np.all(np.abs(rep.residual) <= band)

    def test_decomposition_bookkeeping(self):
        g = make_grid(32, 1.0)
        spec = ou_conditional_mean(1.0, 0.8, 0.6)
        ens, law = simulate(spec, gaussian_initial(), g, 200, 5)
        rep = spde_residual(ens, law, spec, sine())
        assert rep.residual[0] == 0.0
        total = rep.drift_term + rep.trace_term + rep.db_term + rep.residual
        assert np.allclose(total, rep.phi_change, atol=1e-12)

    @pytest.mark.slow
    def test_residual_shrinks_with_N(self):
        g = make_grid(32, 1.0)
        spec = ou_conditional_mean(1.0, 1.0, 0.5)
        rms = []
        for N in (100, 400, 1600):
            sups = []
            for seed in range(30):
                ens, law = simulate(spec, gaussian_initial(), g, N, seed)
                sups.append(spde_residual(ens, law, spec, coordinate_squared()).sup)
            rms.append(math.sqrt(np.mean(np.square(sups))))
        assert rms[0] > rms[1] > rms[2]

    def test_misaligned(self):
        g = make_grid(16, 1.0)
        spec = ou_conditional_mean()
        ens, law = simulate(spec, gaussian_initial(), g, 20, 0)
        other, _ = simulate(spec, gaussian_initial(), g, 21, 0)
        with pytest.raises(ValueError, match="misaligned inputs"):
            spde_residual(other, law, spec, coordinate())


class TestFubini:
    def _ens(self, N=200, seed=0):
        return simulate(ou_conditional_mean(1.0, 1.0, 0.5), gaussian_initial(), make_grid(32, 1.0), N, seed)[0]

    def test_unit_integrand_db(self):
        ens = self._ens()
        assert np.abs(fubini_residual(ens, None, 1.0, "dB")).max() < 1e-12

    def test_unit_integrand_dw(self):
        ens = self._ens()
        res = fubini_residual(ens, None, 1.0, "dW")
        assert np.allclose(res, ens.bundle.idio_paths()[:, :, 0].mean(axis=0), atol=1e-13)

    def test_unit_integrand_dw_clt(self):
        N, hits = 100, 0
        for seed in range(100):
            ens = self._ens(N, seed)
            hits += abs(fubini_residual(ens, None, 1.0, "dW")[-1]) <= 3 * math.sqrt(1.0 / N)
        assert hits >= 99

    def test_squared_state_db(self):
        ens = self._ens()
        res = fubini_residual(ens, None, lambda t, h: h[:, -1, 0] ** 2, "dB", bound=1e6)
        assert np.abs(res).max() < 1e-10

    def test_random_integrand_db(self, rng):
        ens = self._ens()
        H = rng.uniform(-1, 1, size=(200, 32))
        assert np.abs(fubini_residual(ens, None, H, "dB", bound=1.0)).max() < 1e-12

    def test_bound_enforced(self):
        ens = self._ens()
        with pytest.raises(ValueError, match="integrand bound violated"):
            fubini_residual(ens, None, lambda t, h: h[:, -1, 0] * 1e3, "dB", bound=1.0)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            fubini_residual(self._ens(), None, 1.0, "dt")
