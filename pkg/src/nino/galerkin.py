"""Stochastic Galerkin solver on a probabilists' Hermite chaos basis.

The forcing is expanded on its Karhunen-Loeve modes. Two readings of the
random forcing are supported:

``noise="white"``
    Wiener chaos. Each noise channel ``c`` (a column of ``S``, or the
    multiplicative channel) is expanded in time on ``n_slabs`` piecewise
    constant orthonormal functions ``m_i`` over ``[0, T]``, giving one
    standard Gaussian variable per (channel, slab). Products with the
    multiplicative noise are Wick products, which is the Ito reading and
    matches the Lyapunov equations for the moments.
``noise="constant"``
    The forcing is a random field constant in time,
    ``F = sum_k sqrt(lambda_k) phi_k eta_k``. Multiplicative noise acts
    through the first variable and couples modes via the triple products.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from numpy.polynomial.hermite_e import hermeval
from scipy.spatial.distance import cdist

from .grid import CrankNicolson, Grid

MAX_BASIS_SIZE = 1_000_000
NOISE_MODELS = ("white", "constant")


class NonPSDKernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Exponential covariance ``Q exp(-|x1 - x2| / length_scale)``, distances in degrees."""

    amplitude: float
    length_scale: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("kernel amplitude must be >= 0")
        if not self.length_scale > 0:
            raise ValueError("length scale must be positive")

    def matrix(self, X, Y=None) -> np.ndarray:
        d = cdist(X, X if Y is None else Y)
        return self.amplitude * np.exp(-d / self.length_scale)


@dataclass(frozen=True)
class KLBasis:
    eigenvalues: np.ndarray
    eigenfields: np.ndarray  # (n_nodes, N), orthonormal in the weighted inner product
    weights: np.ndarray

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def noise_factor(self) -> np.ndarray:
        """Columns ``sqrt(lambda_k) phi_k`` on the grid nodes."""
        return self.eigenfields * np.sqrt(np.clip(self.eigenvalues, 0.0, None))


def kl_eigenpairs(grid: Grid, kernel: KernelSpec, N: int) -> KLBasis:
    """Leading ``N`` Karhunen-Loeve pairs by Nystrom with trapezoidal weights."""
    n = grid.size
    if not 1 <= N <= n:
        raise ValueError(f"need 1 <= N <= {n}, got {N}")
    w = grid.cell_weights()
    sw = np.sqrt(w)
    K = kernel.matrix(grid.coordinates())
    B = sw[:, None] * K * sw[None, :]
    lam, V = la.eigh(B, subset_by_index=[n - N, n - 1])
    lam, V = lam[::-1], V[:, ::-1]
    if lam.size and lam.min() < -1e-8 * max(lam[0], 0.0):
        raise NonPSDKernelError(f"kernel matrix has eigenvalue {lam.min():.3g}; kernel must be PSD")
    lam = np.clip(lam, 0.0, None)
    return KLBasis(lam, V / sw[:, None], w)


def _hermite_triple(a: int, b: int, c: int) -> int:
    """E[He_a He_b He_c] for a standard Gaussian."""
    total = a + b + c
    if total % 2:
        return 0
    s = total // 2
    if s < a or s < b or s < c:
        return 0
    f = math.factorial
    return f(a) * f(b) * f(c) // (f(s - a) * f(s - b) * f(s - c))


@dataclass
class ChaosBasis:
    """Hermite chaos of total degree <= K in N standard Gaussian variables."""

    N: int
    K: int
    indices: np.ndarray  # (M+1, N) multi-indices, graded lexicographic
    norms: np.ndarray  # E[H_a^2] = prod(a_i!)
    _lookup: dict = field(default_factory=dict, repr=False)
    _first: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.indices)

    def position(self, alpha) -> int | None:
        return self._lookup.get(tuple(int(a) for a in alpha))

    def degree(self) -> np.ndarray:
        return self.indices.sum(axis=1)

    def first_order(self) -> np.ndarray:
        """Positions of the degree-one indices ``e_1, ..., e_N``."""
        if self._first is None:
            unit = [0] * self.N
            pos = []
            for v in range(self.N):
                unit[v] = 1
                pos.append(self._lookup[tuple(unit)])
                unit[v] = 0
            self._first = np.array(pos, dtype=int)
        return self._first

    def triple(self, i: int, j: int, k: int) -> float:
        a, b, c = self.indices[i], self.indices[j], self.indices[k]
        out = 1
        for x, y, z in zip(a, b, c):
            t = _hermite_triple(int(x), int(y), int(z))
            if t == 0:
                return 0.0
            out *= t
        return float(out)

    def triple_products(self):
        """All nonzero ``E[H_i H_j H_k]`` as COO arrays ``(i, j, k, value)``."""
        if self.size ** 3 > 5e7:
            raise MemoryError("basis too large to enumerate the full triple-product tensor")
        rows = []
        for i, j, k in itertools.product(range(self.size), repeat=3):
            v = self.triple(i, j, k)
            if v:
                rows.append((i, j, k, v))
        if not rows:
            return (np.zeros(0, int),) * 3 + (np.zeros(0),)
        arr = np.array(rows)
        return arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int), arr[:, 3]

    def variable_coupling(self, v: int):
        """Nonzero ``E[eta_v H_b H_a] / E[H_a^2]`` as ``(a, b, value, raising)`` arrays.

        ``eta_v = He_1`` so only ``a = b +- e_v`` contribute; ``raising``
        flags the ``a = b + e_v`` entries.
        """
        if self.K == 0:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, bool)
        ev = self.first_order()[v]
        a_list, b_list, vals, raise_ = [], [], [], []
        unit = np.zeros(self.N, dtype=int)
        unit[v] = 1
        for b, beta in enumerate(self.indices):
            for sign in (1, -1):
                pos = self.position(beta + sign * unit)
                if pos is None:
                    continue
                val = self.triple(ev, b, pos) / self.norms[pos]
                if val:
                    a_list.append(pos)
                    b_list.append(b)
                    vals.append(val)
                    raise_.append(sign > 0)
        return np.array(a_list, int), np.array(b_list, int), np.array(vals), np.array(raise_, bool)

    def evaluate(self, eta) -> np.ndarray:
        """``H_a(eta)`` for samples ``eta`` of shape (count, N); returns (count, M+1)."""
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        table = np.empty(eta.shape + (self.K + 1,))
        for d in range(self.K + 1):
            coef = np.zeros(d + 1)
            coef[d] = 1.0
            table[..., d] = hermeval(eta, coef)
        out = np.ones((eta.shape[0], self.size))
        for v in range(self.N):
            out *= table[:, v, self.indices[:, v]]
        return out


def chaos_size(N: int, K: int) -> int:
    return math.comb(N + K, K)


def build_chaos_basis(N: int, K: int) -> ChaosBasis:
    if N < 1 or K < 0:
        raise ValueError("need N >= 1 and K >= 0")
    size = chaos_size(N, K)
    if size > MAX_BASIS_SIZE:
        raise OverflowError(f"chaos basis would have {size} terms (limit {MAX_BASIS_SIZE})")
    indices = []
    for d in range(K + 1):
        level = []
        for combo in itertools.combinations_with_replacement(range(N), d):
            alpha = [0] * N
            for v in combo:
                alpha[v] += 1
            level.append(tuple(alpha))
        indices.extend(sorted(level, reverse=True))
    idx = np.array(indices, dtype=int).reshape(len(indices), N)
    norms = np.array([math.prod(math.factorial(int(a)) for a in alpha) for alpha in idx], dtype=float)
    return ChaosBasis(N, K, idx, norms, {alpha: i for i, alpha in enumerate(indices)})


def chaos_variable_count(n_additive: int, multiplicative: bool, noise: str = "white", n_slabs: int = 1) -> int:
    if noise == "white":
        return (n_additive + int(multiplicative)) * n_slabs
    return max(n_additive, int(multiplicative))


@dataclass
class ChaosSystem:
    """Deterministic block system for the chaos coefficients ``X_a``.

    ``forcing[:, v]`` is the spatial forcing attached to variable ``v``;
    ``mult_vars`` lists the variables carrying the multiplicative noise.
    For white noise, variable ``v`` is active on slab ``slab_of[v]`` with
    amplitude ``1/sqrt(slab width)``.
    """

    A: object
    basis: ChaosBasis
    forcing: np.ndarray
    S1: object | None
    noise: str
    horizon: float | None
    n_slabs: int
    slab_of: np.ndarray
    mult_vars: np.ndarray
    couplings: dict

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def blocks(self) -> int:
        return self.basis.size

    def temporal_weight(self, t: float) -> np.ndarray:
        """Weight ``m_v(t)`` of every variable at time ``t``."""
        if self.noise == "constant":
            return np.ones(self.basis.N)
        width = self.horizon / self.n_slabs
        slab = min(int(t // width), self.n_slabs - 1)
        return np.where(self.slab_of == slab, 1.0 / np.sqrt(width), 0.0)


def assemble_galerkin_system(A, basis: ChaosBasis, S=None, S1=None, noise: str = "white",
                             horizon: float | None = None, n_slabs: int = 1) -> ChaosSystem:
    """Galerkin projection of ``dx = A x dt + S1 x dW1 + S dW`` onto ``basis``.

    White noise numbers the variables channel-major: the additive columns of
    ``S`` first, then the multiplicative channel, each with ``n_slabs``
    consecutive variables.
    """
    if noise not in NOISE_MODELS:
        raise ValueError(f"noise must be one of {NOISE_MODELS}")
    n = A.shape[0]
    S = np.zeros((n, 0)) if S is None else np.asarray(S, dtype=float).reshape(n, -1)
    q = S.shape[1]
    mult = S1 is not None
    N = basis.N
    if noise == "white":
        if horizon is None or not horizon > 0:
            raise ValueError("white noise needs a positive horizon")
        if n_slabs < 1:
            raise ValueError("n_slabs must be >= 1")
        expected = chaos_variable_count(q, mult, "white", n_slabs)
        if N != expected:
            raise ValueError(f"dimension mismatch: basis has {N} variables, noise needs {expected}")
        channel = np.repeat(np.arange(q + int(mult)), n_slabs)
        slab_of = np.tile(np.arange(n_slabs), q + int(mult))
        forcing = np.zeros((n, N))
        add = channel < q
        forcing[:, add] = S[:, channel[add]]
        mult_vars = np.flatnonzero(channel == q) if mult else np.zeros(0, int)
    else:
        if N < max(q, 1):
            raise ValueError(f"dimension mismatch: basis has {N} variables, forcing has {q} KL modes")
        slab_of = np.zeros(N, int)
        forcing = np.zeros((n, N))
        forcing[:, :q] = S
        mult_vars = np.array([0]) if mult else np.zeros(0, int)
        n_slabs = 1
    couplings = {}
    for v in mult_vars:
        a, b, val, raising = basis.variable_coupling(int(v))
        if noise == "white":
            a, b, val = a[raising], b[raising], val[raising]
        couplings[int(v)] = (a, b, val)
    return ChaosSystem(A, basis, forcing, S1, noise, horizon, n_slabs, slab_of, mult_vars, couplings)


@dataclass
class ChaosTrajectory:
    times: np.ndarray
    modes: np.ndarray  # (n_saved, M+1, n)


def _forcing_matrix(system, t):
    F = np.zeros((system.n, system.blocks))
    if system.basis.K == 0:
        return F
    w = system.temporal_weight(t)
    live = np.flatnonzero(w * np.any(system.forcing != 0, axis=0))
    if live.size:
        F[:, system.basis.first_order()[live]] = system.forcing[:, live] * w[live]
    return F


def solve_chaos(system: ChaosSystem, x0, h: float, n_steps: int, save_every: int = 1) -> ChaosTrajectory:
    """Crank-Nicolson in time for all chaos coefficients.

    The initial state sits in the constant mode; the rest start at zero.
    """
    x0 = np.asarray(x0, dtype=float)
    n, M1 = system.n, system.blocks
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    if system.noise == "white" and abs(n_steps * h - system.horizon) > 1e-9 * system.horizon:
        raise ValueError("n_steps * h must equal the horizon the system was assembled for")
    X = np.zeros((n, M1))
    X[:, 0] = x0
    times, saved = [0.0], [X.T.copy()]
    coupled = system.S1 is not None and system.noise == "constant"
    if coupled:
        stepper, X = _block_stepper(system, h), X.reshape(-1, order="F")
    else:
        stepper = CrankNicolson(system.A, h)
        by_degree = [np.flatnonzero(system.basis.degree() == d) for d in range(system.basis.K + 1)]
    for k in range(n_steps):
        t_mid = (k + 0.5) * h
        F = _forcing_matrix(system, t_mid)
        if coupled:
            X = stepper.step(X, F.reshape(-1, order="F"))
        elif system.S1 is None:
            X = stepper.step(X, F)
        else:
            X = _wick_step(system, stepper, X, F, h, t_mid, by_degree)
        if (k + 1) % save_every == 0 or k + 1 == n_steps:
            times.append((k + 1) * h)
            saved.append((X.reshape(n, M1, order="F") if coupled else X).T.copy())
    return ChaosTrajectory(np.array(times), np.array(saved))


def _block_stepper(system, h):
    A = system.A if sp.issparse(system.A) else sp.csr_matrix(system.A)
    S1 = system.S1 if sp.issparse(system.S1) else sp.csr_matrix(system.S1)
    M1 = system.blocks
    a, b, val = system.couplings[int(system.mult_vars[0])]
    C = sp.coo_matrix((val, (a, b)), shape=(M1, M1)).tocsr()
    L = sp.kron(sp.identity(M1), A) + sp.kron(C, S1)
    return CrankNicolson(L.tocsr(), h)


def _wick_step(system, stepper, X, F, h, t_mid, by_degree):
    # lower-triangular in total degree: solve degree by degree, feeding the
    # trapezoidal average of each parent block into its children
    w = system.temporal_weight(t_mid)
    X_new = np.empty_like(X)
    active = [v for v in system.mult_vars if w[v] != 0]
    rhs_all = stepper._explicit @ X + h * F
    for idx in by_degree:
        rhs = rhs_all[:, idx]
        for v in active:
            a, b, val = system.couplings[int(v)]
            sel = np.isin(a, idx)
            if not np.any(sel):
                continue
            a_s, b_s, val_s = a[sel], b[sel], val[sel]
            parent = 0.5 * (X[:, b_s] + X_new[:, b_s]) * val_s
            contrib = w[v] * (system.S1 @ parent)
            cols = np.searchsorted(idx, a_s)
            np.add.at(rhs.T, cols, h * contrib.T)
        X_new[:, idx] = stepper._solve(rhs)
    return X_new


def chaos_statistics(traj: ChaosTrajectory, basis: ChaosBasis):
    """Mean, pointwise variance and a realization sampler of a chaos trajectory.

    ``sampler(rng, count)`` returns realizations of shape
    ``(count, n_saved, n)``, one Gaussian draw per realization.
    """
    mean = traj.modes[:, 0, :]
    var = np.einsum("tan,a->tn", traj.modes[:, 1:, :] ** 2, basis.norms[1:])

    def sampler(rng, count, eta=None):
        if eta is None:
            eta = rng.standard_normal((count, basis.N))
        H = basis.evaluate(eta)
        return np.einsum("sa,tan->stn", H, traj.modes)

    return mean, var, sampler
