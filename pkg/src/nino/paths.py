"""Path simulation of the linear SDE models: Euler-Maruyama and strong Taylor 1.5.

State arrays carry paths along the leading axis, ``x.shape == (n_paths, n)``.

Random numbers: ``SeedSequence(seed)`` is spawned into one child stream per
block of ``PATH_BLOCK`` paths, so the paths of a full block see the same
numbers however many further paths are requested. Within a partial block
the draw depends on the block size. Per step, each block
draws the additive channels first, then the multiplicative channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .operators import OperatorSet

PATH_BLOCK = 1024
SCHEMES = ("taylor15", "euler")


@dataclass
class NoiseIncrements:
    """Brownian increments over one step of size ``h``.

    ``dW``/``dZ`` belong to the additive channels (shape ``(paths, q)``),
    ``dW1``/``dZ1`` to the single multiplicative channel (shape ``(paths,)``).
    ``dZ`` is the integral of ``W(s) - W(t)`` over the step:
    ``Var dZ = h^3/3`` and ``Cov(dW, dZ) = h^2/2``.
    """

    dW: np.ndarray | None = None
    dZ: np.ndarray | None = None
    dW1: np.ndarray | None = None
    dZ1: np.ndarray | None = None

    @staticmethod
    def pair_from_normals(u1, u2, h):
        # exact Cholesky factor of the (dW, dZ) covariance
        dW = np.sqrt(h) * u1
        dZ = 0.5 * h**1.5 * (u1 + u2 / np.sqrt(3.0))
        return dW, dZ

    @classmethod
    def draw(cls, rng: np.random.Generator, n_paths: int, q: int, multiplicative: bool, h: float):
        inc = cls()
        if q:
            u = rng.standard_normal((2, n_paths, q))
            inc.dW, inc.dZ = cls.pair_from_normals(u[0], u[1], h)
        if multiplicative:
            u = rng.standard_normal((2, n_paths))
            inc.dW1, inc.dZ1 = cls.pair_from_normals(u[0], u[1], h)
        return inc


def _apply(M, X):
    """Row-wise ``M @ x`` for a batch ``X`` of shape (paths, n)."""
    return (M @ X.T).T if sp.issparse(M) else X @ M.T


def euler_maruyama_step(ops: OperatorSet, x, h: float, noise: NoiseIncrements):
    x = np.asarray(x, dtype=float)
    out = x + h * _apply(ops.A, x)
    if ops.S is not None and noise.dW is not None:
        out = out + noise.dW @ ops.S.T
    if ops.S1 is not None and noise.dW1 is not None:
        out = out + _apply(ops.S1, x) * np.reshape(noise.dW1, (-1, 1) if x.ndim > 1 else ())
    return out


def taylor15_step(ops: OperatorSet, x, h: float, noise: NoiseIncrements):
    """Strong order 1.5 Ito-Taylor step for linear drift and diffusion.

    Channels of the mixed model are advanced with independent increments;
    cross-channel iterated integrals are not included.
    """
    x = np.asarray(x, dtype=float)
    A = ops.A
    Ax = _apply(A, x)
    out = x + h * Ax + 0.5 * h * h * _apply(A, Ax)
    if ops.S is not None and noise.dW is not None:
        out = out + noise.dW @ ops.S.T + _apply(A, noise.dZ @ ops.S.T)
    if ops.S1 is not None and noise.dW1 is not None:
        S1 = ops.S1
        shape = (-1, 1) if x.ndim > 1 else ()
        dW = np.reshape(noise.dW1, shape)
        dZ = np.reshape(noise.dZ1, shape)
        b = _apply(S1, x)
        bb = _apply(S1, b)
        out = (
            out
            + b * dW
            + _apply(A, b) * dZ
            + _apply(S1, Ax) * (h * dW - dZ)
            + 0.5 * bb * (dW * dW - h)
            + 0.5 * _apply(S1, bb) * (dW * dW / 3.0 - h) * dW
        )
    return out


STEPPERS = {"taylor15": taylor15_step, "euler": euler_maruyama_step}


@dataclass
class PathEnsemble:
    """Per-step ensemble summaries, plus full paths when requested."""

    times: np.ndarray
    n_paths: int
    mean: np.ndarray
    covariances: dict = field(default_factory=dict)
    paths: np.ndarray | None = None

    def covariance(self, step: int = -1) -> np.ndarray:
        step = step % len(self.times)
        return self.covariances[step]


def _block_rngs(seed, n_paths):
    n_blocks = -(-n_paths // PATH_BLOCK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    for b, child in enumerate(children):
        size = min(PATH_BLOCK, n_paths - b * PATH_BLOCK)
        yield np.random.default_rng(child), size


def run_ensemble(ops: OperatorSet, x0, h: float, n_steps: int, n_paths: int, scheme: str = "taylor15",
                 seed=0, cov_steps=(-1,), keep_paths: bool = False) -> PathEnsemble:
    """Simulate ``n_paths`` independent paths from the deterministic state ``x0``.

    ``cov_steps`` lists the steps (negative indices allowed) at which the
    unbiased sample covariance is accumulated; pass ``()`` to skip it.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if scheme not in STEPPERS:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not h > 0:
        raise ValueError("step h must be positive")
    step = STEPPERS[scheme]
    x0 = np.asarray(x0, dtype=float)
    n = ops.n
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},), got {x0.shape}")
    q = 0 if ops.S is None else ops.S.shape[1]
    mult = ops.S1 is not None
    cov_steps = sorted({s % (n_steps + 1) for s in cov_steps})
    sums = np.zeros((n_steps + 1, n))
    outer = {s: np.zeros((n, n)) for s in cov_steps}
    paths = np.empty((n_paths, n_steps + 1, n)) if keep_paths else None
    offset = 0
    for rng, size in _block_rngs(seed, n_paths):
        X = np.repeat(x0[None, :], size, axis=0)
        for k in range(n_steps + 1):
            if k:
                X = step(ops, X, h, NoiseIncrements.draw(rng, size, q, mult, h))
            sums[k] += X.sum(axis=0)
            if k in outer:
                outer[k] += X.T @ X
            if keep_paths:
                paths[offset:offset + size, k] = X
        offset += size
    mean = sums / n_paths
    covs = {}
    for s, M in outer.items():
        if n_paths > 1:
            C = (M - n_paths * np.outer(mean[s], mean[s])) / (n_paths - 1)
        else:
            C = np.zeros((n, n))
        covs[s] = 0.5 * (C + C.T)
    return PathEnsemble(np.arange(n_steps + 1) * h, n_paths, mean, covs, paths)


def simulate_path(ops: OperatorSet, x0, h: float, n_steps: int, scheme: str = "taylor15", seed=0) -> np.ndarray:
    """One trajectory, shape ``(n_steps + 1, n)``."""
    return run_ensemble(ops, x0, h, n_steps, 1, scheme, seed, cov_steps=(), keep_paths=True).paths[0]
