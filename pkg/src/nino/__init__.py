"""Linear stochastic models of sea-surface-temperature anomalies.

Mean and covariance by deterministic equations, stochastic Galerkin, and
strong Taylor path simulation, with calibration from gridded series.
"""
from .calibration import LinearInverseModel, estimate_additive_noise, estimate_drift, lag_covariances
from .covariance import DLEProblem, QuadratureRule, dle_additive_step, dle_strang_step, propagate_mean, solve_dle
from .galerkin import (KernelSpec, assemble_galerkin_system, build_chaos_basis, chaos_statistics, kl_eigenpairs,
                       solve_chaos)
from .grid import Field, Grid, RegionMask, VelocityField, assemble_transport_operator, crank_nicolson_step
from .operators import OperatorSet
from .paths import euler_maruyama_step, run_ensemble, taylor15_step
from .scenario import AnomalySeries, ScenarioConfig, generate_synthetic_scenario
from .simulators import EnsembleSimulator, MeanCovarianceSimulator, StochasticGalerkinSimulator

__version__ = "0.1.0"

__all__ = [
    "AnomalySeries", "DLEProblem", "EnsembleSimulator", "Field", "Grid", "KernelSpec", "LinearInverseModel",
    "MeanCovarianceSimulator", "OperatorSet", "QuadratureRule", "RegionMask", "ScenarioConfig",
    "StochasticGalerkinSimulator", "VelocityField", "assemble_galerkin_system", "assemble_transport_operator",
    "build_chaos_basis", "chaos_statistics", "crank_nicolson_step", "dle_additive_step", "dle_strang_step",
    "estimate_additive_noise", "estimate_drift", "euler_maruyama_step", "generate_synthetic_scenario",
    "kl_eigenpairs", "lag_covariances", "propagate_mean", "run_ensemble", "solve_chaos", "solve_dle",
    "taylor15_step",
]
