"""Asymptotic bias-variance decomposition of random-features ridge regression.

Modules:

- ``numerics``: quadrature, damped Newton root finding, finite-difference
  Hessians, well-conditioned symmetric solves;
- ``theory``: saddle point, replica actions, fluctuation prefactors, the six
  Psi scalars, and the error formulas (decomposition, ensembling,
  divide-and-conquer, ridge optimization);
- ``simulation``: finite-size Monte Carlo lab (true random-features and
  Gaussian-covariate models, trace estimators, empirical decomposition,
  ensembling experiments);
- ``sweep``: config-driven parameter sweeps and CSV/JSON emission;
- ``cli``: the ``lazy-descent`` command-line entry point.
"""
from . import numerics, simulation, sweep, theory
from .theory import (
    ActivationMoments,
    ErrorDecomposition,
    ModelParams,
    PsiSet,
    SaddlePoint,
    activation_moments,
    decompose_error,
    divide_conquer_error,
    ensemble_error,
    optimal_lambda,
    psi_terms,
    relu_moments,
    solve_saddle,
)
from .simulation import SimConfig, empirical_decomposition, ensemble_run, estimate_psi_traces
from .sweep import ConfigError, SweepSpec, emit, load_preset, parse_config, run_sweep

__version__ = "0.1.0"

__all__ = [
    "ActivationMoments",
    "ModelParams",
    "SaddlePoint",
    "PsiSet",
    "ErrorDecomposition",
    "activation_moments",
    "relu_moments",
    "solve_saddle",
    "psi_terms",
    "decompose_error",
    "ensemble_error",
    "divide_conquer_error",
    "optimal_lambda",
    "SimConfig",
    "estimate_psi_traces",
    "empirical_decomposition",
    "ensemble_run",
    "ConfigError",
    "SweepSpec",
    "parse_config",
    "load_preset",
    "run_sweep",
    "emit",
    "numerics",
    "theory",
    "simulation",
    "sweep",
    "__version__",
]
