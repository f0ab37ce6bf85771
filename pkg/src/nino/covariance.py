"""Mean propagation and low-rank differential Lyapunov solvers.

Additive models flow ``P' = A P + P A^T + S S^T``; one step is exact up to
the quadrature of the noise integral::

    P(h) = e^{hA} P0 e^{hA^T} + int_0^h e^{sA} S S^T e^{sA^T} ds

Multiplicative models flow ``P' = A P + P A^T + S1 P S1^T (+ S2 S2^T)``
with Strang splitting: half a step of the linear (and additive) part, a
full step of the ``S1 P S1^T`` part by its second-order expansion, and
another half step. For multiplicative noise ``P`` is the second moment
``E[x x^T]``; it coincides with the covariance only when the mean is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import CrankNicolson
from .linalg import DEFAULT_MAX_RANK, append_columns, compress_columns, exp_action

DEFAULT_TOL = 1e-8


class RankExplosionError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights on [0, 1]; scaled to [0, h] by the caller."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-D arrays of equal length")
        if np.any(np.diff(nodes) < 0) or nodes.min() < 0 or nodes.max() > 1:
            raise ValueError("nodes must be sorted and lie in [0, 1]")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def gauss_legendre(cls, n: int = 4) -> "QuadratureRule":
        x, w = np.polynomial.legendre.leggauss(n)
        return cls((x + 1) / 2, w / 2, 2 * n)

    @classmethod
    def midpoint(cls) -> "QuadratureRule":
        return cls(np.array([0.5]), np.array([1.0]), 2)


def propagate_mean(A, m0, h: float, n_steps: int) -> np.ndarray:
    """Crank-Nicolson trajectory of ``m' = A m``; shape ``(n_steps + 1, n)``."""
    m0 = np.asarray(m0, dtype=float)
    out = np.empty((n_steps + 1,) + m0.shape)
    out[0] = m0
    if n_steps == 0:
        return out
    stepper = CrankNicolson(A, h)
    for k in range(n_steps):
        out[k + 1] = stepper.step(out[k])
    return out


def noise_block(A, S, h: float, quad: QuadratureRule, tol: float = 1e-12) -> np.ndarray:
    """Columns ``sqrt(h w_k) e^{tau_k h A} S`` whose Gram product approximates the noise integral."""
    S = np.asarray(S, dtype=float)
    if S.shape[1] == 0:
        return np.zeros((S.shape[0], 0))
    return np.hstack([np.sqrt(h * w) * exp_action(A, S, tau * h, tol) for tau, w in zip(quad.nodes, quad.weights)])


def dle_additive_step(A, S, Z0, h: float, quad: QuadratureRule | None = None, tol: float = DEFAULT_TOL,
                      max_rank: int | None = DEFAULT_MAX_RANK, _block=None) -> np.ndarray:
    """Advance the factor of ``P' = AP + PA^T + SS^T`` by one step of size ``h``."""
    quad = quad or QuadratureRule.gauss_legendre()
    block = noise_block(A, S, h, quad) if _block is None else _block
    Z = np.hstack([exp_action(A, np.asarray(Z0, dtype=float), h), block])
    return compress_columns(Z, tol, max_rank)


def _checked_compress(Z, tol, max_rank):
    Z = compress_columns(Z, tol, None)
    if max_rank is not None and Z.shape[1] > max_rank:
        raise RankExplosionError(
            f"factor rank {Z.shape[1]} exceeds max rank {max_rank} after compression; use a larger tolerance"
        )
    return Z


def dle_strang_step(A, S1, S2, Z0, h: float, tol: float = DEFAULT_TOL, quad: QuadratureRule | None = None,
                    max_rank: int | None = DEFAULT_MAX_RANK, _half_block=None) -> np.ndarray:
    """One Strang step for ``P' = AP + PA^T + S1 P S1^T (+ S2 S2^T)``.

    The outer half steps solve ``P' = AP + PA^T (+ S2 S2^T)`` by the
    exponential/quadrature update; the middle step applies
    ``P + h F(P) + h^2/2 F(F(P))`` with ``F(P) = S1 P S1^T`` in factored form.
    """
    quad = quad or QuadratureRule.gauss_legendre()
    Z = np.asarray(Z0, dtype=float)

    def outer(Z):
        Z = exp_action(A, Z, h / 2)
        if S2 is not None:
            block = noise_block(A, S2, h / 2, quad) if _half_block is None else _half_block
            Z = np.hstack([Z, block])
        return _checked_compress(Z, tol, max_rank)

    Z = outer(Z)
    if S1 is not None:
        S1Z = S1 @ Z
        Z = _checked_compress(np.hstack([Z, np.sqrt(h) * S1Z, (h / np.sqrt(2.0)) * (S1 @ S1Z)]), tol, max_rank)
    return outer(Z)


@dataclass
class DLEProblem:
    """Differential Lyapunov problem on ``[0, T]`` with fixed step ``h``.

    ``S`` is the additive noise factor (``S2`` in the two-noise model),
    ``S1`` the multiplicative matrix. ``P0`` is the initial factor.
    """

    A: object
    P0: np.ndarray
    T: float
    h: float
    S: np.ndarray | None = None
    S1: np.ndarray | None = None
    tol: float = DEFAULT_TOL
    max_rank: int | None = DEFAULT_MAX_RANK
    quad: QuadratureRule = field(default_factory=QuadratureRule.gauss_legendre)
    stride: int = 1
    method: str = "auto"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if not self.T >= self.h:
            raise ValueError("horizon T must be at least one step")
        n = self.A.shape[0]
        P0 = np.asarray(self.P0, dtype=float)
        if P0.ndim == 1:
            P0 = P0.reshape(-1, 1)
        if P0.shape[0] != n:
            raise ValueError(f"P0 has {P0.shape[0]} rows, A is {n}x{n}")
        self.P0 = P0
        if self.S is not None:
            self.S = np.asarray(self.S, dtype=float).reshape(n, -1)
        if self.S1 is not None and self.S1.shape != (n, n):
            raise ValueError("S1 must be square and match A")
        if self.method not in ("auto", "step", "accumulate"):
            raise ValueError("method must be 'auto', 'step' or 'accumulate'")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.h))
        if abs(n * self.h - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"horizon {self.T} is not a whole number of steps of {self.h}")
        return n

    @property
    def multiplicative(self) -> bool:
        return self.S1 is not None


@dataclass
class DLETrajectory:
    times: np.ndarray
    factors: list

    def covariance(self, k: int = -1) -> np.ndarray:
        Z = self.factors[k]
        return Z @ Z.T

    @property
    def ranks(self) -> list[int]:
        return [Z.shape[1] for Z in self.factors]


def solve_dle(problem: DLEProblem) -> DLETrajectory:
    """Integrate the problem, returning factors at every ``stride``-th step (and the last)."""
    p = problem
    n_steps = p.n_steps
    keep = lambda k: k % p.stride == 0 or k == n_steps
    times, factors = [0.0], [compress_columns(p.P0, p.tol, p.max_rank)]
    if p.multiplicative:
        half_block = noise_block(p.A, p.S, p.h / 2, p.quad) if p.S is not None else None
        Z = factors[0]
        for k in range(1, n_steps + 1):
            Z = dle_strang_step(p.A, p.S1, p.S, Z, p.h, p.tol, p.quad, p.max_rank, _half_block=half_block)
            if keep(k):
                times.append(k * p.h)
                factors.append(Z)
        return DLETrajectory(np.array(times), factors)

    S = p.S if p.S is not None else np.zeros((p.A.shape[0], 0))
    block = noise_block(p.A, S, p.h, p.quad)
    if p.method == "step":
        Z = factors[0]
        for k in range(1, n_steps + 1):
            Z = dle_additive_step(p.A, S, Z, p.h, p.quad, p.tol, p.max_rank, _block=block)
            if keep(k):
                times.append(k * p.h)
                factors.append(Z)
        return DLETrajectory(np.array(times), factors)

    # accumulate: P_k = E^k P0 E^kT + sum_{j<k} E^j W W^T E^jT with E = e^{hA};
    # only the newest noise block and the initial factor are propagated each step
    H = factors[0]
    V = block
    G = np.zeros((p.A.shape[0], 0))
    for k in range(1, n_steps + 1):
        G = append_columns(G, V, p.tol, p.max_rank)
        if k < n_steps:
            V = exp_action(p.A, V, p.h)
        if H.shape[1]:
            H = exp_action(p.A, H, p.h)
        if keep(k):
            times.append(k * p.h)
            factors.append(compress_columns(np.hstack([H, G]), p.tol, p.max_rank) if H.shape[1] else G)
    return DLETrajectory(np.array(times), factors)
