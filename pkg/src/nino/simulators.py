"""Estimator-style front ends for the three simulation approaches.

Each simulator is configured by its constructor, ``fit`` takes an
:class:`~nino.operators.OperatorSet`, and ``simulate(x0)`` returns a
:class:`SimulationResult`. ``predict(x0)`` is the mean trajectory and
``sample(x0, count, seed)`` draws realizations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .covariance import DLEProblem, propagate_mean, solve_dle
from .galerkin import (assemble_galerkin_system, build_chaos_basis, chaos_size, chaos_statistics,
                       chaos_variable_count, solve_chaos)
from .linalg import compress_columns, factor_downdate
from .operators import OperatorSet
from .paths import SCHEMES, run_ensemble
from .sampler import RealizationRequest, sample_realizations

METHODS = ("mean-cov", "galerkin") + SCHEMES


@dataclass
class SimulationResult:
    """Output on the saved time grid, in the operator set's state coordinates.

    ``factors[k]`` is a covariance factor at ``times[k]`` (mean-cov only);
    ``variance`` is the pointwise variance for every saved time.
    """

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    factors: list | None = None
    realizations: np.ndarray | None = None
    size_metric: int = 0


def _check_ops(ops):
    if not isinstance(ops, OperatorSet):
        raise TypeError("fit expects an OperatorSet")
    return ops


class _Simulator(BaseEstimator):
    def fit(self, ops, y=None):
        self.ops_ = _check_ops(ops)
        self.n_features_in_ = ops.n
        return self

    def _x0(self, x0):
        check_is_fitted(self, "ops_")
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (self.ops_.n,):
            raise ValueError(f"x0 must have shape ({self.ops_.n},), got {x0.shape}")
        return x0

    def predict(self, x0):
        return self.simulate(x0).mean

    def sample(self, x0, count, seed=0):
        return self.simulate(x0, count=count, seed=seed).realizations


class MeanCovarianceSimulator(_Simulator):
    """Deterministic mean equation plus low-rank Lyapunov flow.

    For multiplicative noise the Lyapunov flow carries the second moment;
    the covariance factor is recovered by subtracting the mean.
    """

    def __init__(self, h=0.5, n_steps=400, tol=1e-8, max_rank=200, method="auto", stride=1):
        self.h = h
        self.n_steps = n_steps
        self.tol = tol
        self.max_rank = max_rank
        self.method = method
        self.stride = stride

    def simulate(self, x0, count=0, seed=0):
        x0 = self._x0(x0)
        ops = self.ops_
        mean = propagate_mean(ops.A, x0, self.h, self.n_steps)
        mult = ops.S1 is not None
        P0 = x0.reshape(-1, 1) if mult else np.zeros((ops.n, 0))
        traj = solve_dle(DLEProblem(ops.A, P0, self.h * self.n_steps, self.h, S=ops.S, S1=ops.S1, tol=self.tol,
                                    max_rank=self.max_rank, stride=self.stride, method=self.method))
        keep = np.rint(traj.times / self.h).astype(int)
        mean = mean[keep]
        factors = traj.factors
        if mult:
            factors = [factor_downdate(Z, m, self.tol) for Z, m in zip(factors, mean)]
        variance = np.array([np.sum(Z * Z, axis=1) for Z in factors])
        real = None
        if count:
            real = sample_realizations(RealizationRequest(mean, factors, seed, count))
        rank = max(Z.shape[1] for Z in traj.factors)
        return SimulationResult(traj.times, mean, variance, factors, real, rank)


SLAB_STEPS = 4
MAX_DEFAULT_BLOCKS = 2000


def default_slabs(n_steps: int, n_additive: int, multiplicative: bool, degree: int) -> int:
    """Temporal slab count: one per ``SLAB_STEPS`` steps while the basis stays within budget."""
    slabs = max(1, n_steps // SLAB_STEPS)
    while slabs > 1 and chaos_size(chaos_variable_count(n_additive, multiplicative, "white", slabs),
                                   degree) > MAX_DEFAULT_BLOCKS:
        slabs = max(1, int(slabs * 0.9))
    return slabs


class StochasticGalerkinSimulator(_Simulator):
    """Hermite chaos on the leading ``n_kl`` columns of the additive noise factor.

    ``noise="white"`` expands each channel on ``n_slabs`` temporal slabs. The
    default ``None`` uses one slab per ``SLAB_STEPS`` steps, reduced until the
    basis has at most ``MAX_DEFAULT_BLOCKS`` terms.
    """

    def __init__(self, h=0.5, n_steps=400, n_kl=3, degree=1, noise="white", n_slabs=None, save_every=1):
        self.h = h
        self.n_steps = n_steps
        self.n_kl = n_kl
        self.degree = degree
        self.noise = noise
        self.n_slabs = n_slabs
        self.save_every = save_every

    def fit(self, ops, y=None):
        super().fit(ops)
        if self.n_kl < 1:
            raise ValueError("galerkin needs N >= 1 random variables")
        if ops.S1 is not None and self.degree < 1:
            raise ValueError("multiplicative noise needs degree K >= 1")
        S = None if ops.S is None else ops.S[:, : self.n_kl]
        q = 0 if S is None else S.shape[1]
        mult = ops.S1 is not None
        self.n_slabs_ = self.n_slabs
        if self.n_slabs_ is None:
            self.n_slabs_ = default_slabs(self.n_steps, q, mult, self.degree)
        if self.noise == "white":
            N = chaos_variable_count(q, mult, "white", self.n_slabs_)
        else:
            N = max(q, 1)
        self.basis_ = build_chaos_basis(N, self.degree)
        self.system_ = assemble_galerkin_system(ops.A, self.basis_, S=S, S1=ops.S1, noise=self.noise,
                                                horizon=self.h * self.n_steps, n_slabs=self.n_slabs_)
        return self

    def simulate(self, x0, count=0, seed=0):
        x0 = self._x0(x0)
        traj = solve_chaos(self.system_, x0, self.h, self.n_steps, self.save_every)
        mean, var, sampler = chaos_statistics(traj, self.basis_)
        real = sampler(np.random.default_rng(seed), count) if count else None
        return SimulationResult(traj.times, mean, var, None, real, self.basis_.size)


class EnsembleSimulator(_Simulator):
    """Monte Carlo paths with Taylor 1.5 or Euler-Maruyama."""

    def __init__(self, scheme="taylor15", h=0.5, n_steps=400, n_paths=50):
        self.scheme = scheme
        self.h = h
        self.n_steps = n_steps
        self.n_paths = n_paths

    def simulate(self, x0, count=None, seed=0):
        x0 = self._x0(x0)
        count = self.n_paths if not count else count
        ens = run_ensemble(self.ops_, x0, self.h, self.n_steps, count, self.scheme, seed,
                           cov_steps=(), keep_paths=True)
        var = ens.paths.var(axis=0, ddof=1) if count > 1 else np.zeros_like(ens.mean)
        return SimulationResult(ens.times, ens.mean, var, None, ens.paths, count)

    def final_covariance(self, x0, seed=0):
        x0 = self._x0(x0)
        ens = run_ensemble(self.ops_, x0, self.h, self.n_steps, self.n_paths, self.scheme, seed)
        return ens.covariance(-1)


def make_simulator(method: str, h: float, n_steps: int, n_paths: int = 50, **opts):
    """Simulator for a CLI method name; ``opts`` go to the Galerkin or mean-cov constructor."""
    if method == "mean-cov":
        keys = ("tol", "max_rank", "stride")
        return MeanCovarianceSimulator(h, n_steps, **{k: v for k, v in opts.items() if k in keys})
    if method == "galerkin":
        keys = ("n_kl", "degree", "noise", "n_slabs", "save_every")
        return StochasticGalerkinSimulator(h, n_steps, **{k: v for k, v in opts.items() if k in keys})
    if method in SCHEMES:
        return EnsembleSimulator(method, h, n_steps, n_paths)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def final_covariance(result: SimulationResult) -> np.ndarray:
    """Covariance at the last saved time from factors or realizations."""
    if result.factors is not None:
        Z = compress_columns(result.factors[-1], 1e-12, None)
        return Z @ Z.T
    if result.realizations is not None:
        return np.cov(result.realizations[:, -1, :], rowvar=False)
    raise ValueError("result carries neither factors nor realizations")
