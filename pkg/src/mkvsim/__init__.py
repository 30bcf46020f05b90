"""Particle simulation and diagnostics for McKean-Vlasov SDEs with common noise."""

from .euler import ConditionalLawPath, ParticleEnsemble, simulate, simulate_streaming
from .girsanov import (ContractionParams, CouplingCostSpec, CouplingSample, contraction_alpha,
                       coupling_cost_estimate, doleans_weight, reweighted_expectation, simulate_driftless,
                       solve_T, tv_contraction_experiment)
from .measure import EmpiricalMeasure, ot_exact_small, tv_histogram, wasserstein_1d, wasserstein_sliced
from .model import (CoefficientSpec, build_model, constant_spec, dirac_initial, gaussian_initial, kuramoto_kernel,
                    ou_conditional_mean)
from .noise import NoiseBundle, TimeGrid, make_grid, sample_bundle

__version__ = "0.1.0"

__all__ = [
    "CoefficientSpec", "ConditionalLawPath", "ContractionParams", "CouplingCostSpec", "CouplingSample",
    "EmpiricalMeasure", "NoiseBundle", "ParticleEnsemble", "TimeGrid", "build_model", "constant_spec", "contraction_alpha",
    "coupling_cost_estimate", "dirac_initial", "doleans_weight", "gaussian_initial", "kuramoto_kernel", "make_grid",
    "ot_exact_small", "ou_conditional_mean", "reweighted_expectation", "sample_bundle", "simulate", "simulate_driftless",
    "simulate_streaming", "solve_T", "tv_contraction_experiment", "tv_histogram", "wasserstein_1d",
    "wasserstein_sliced",
]
