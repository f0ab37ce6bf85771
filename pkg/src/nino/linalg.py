"""Dense and sparse kernels shared by the solvers.

Low-rank factors are plain ``(n, r)`` arrays ``Z`` standing for ``Z @ Z.T``.
A factor with ``r == 0`` represents the zero matrix.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

DEFAULT_MAX_RANK = 200
KRONECKER_MAX_N = 50


class ExpActionError(ArithmeticError):
    pass


class BranchCutError(ValueError):
    """Matrix has an eigenvalue on the closed negative real axis."""

    def __init__(self, eigenvalue, hint=""):
        self.eigenvalue = eigenvalue
        msg = f"no principal logarithm: eigenvalue {eigenvalue!r} lies on the closed negative real axis"
        super().__init__(f"{msg}; {hint}" if hint else msg)


class LyapunovSolvabilityError(ValueError):
    pass


class IndefiniteMatrixError(ValueError):
    pass


def _onenorm(A) -> float:
    if sp.issparse(A):
        return float(abs(A).sum(axis=0).max()) if A.nnz else 0.0
    return float(np.abs(A).sum(axis=0).max()) if A.size else 0.0


def exp_action(A, B, t: float = 1.0, tol: float = 1e-12, max_terms: int = 60):
    """Compute ``expm(t*A) @ B`` without forming the exponential.

    Scaling plus truncated Taylor series: the interval is split into ``s``
    substeps with ``||t*A/s||_1 <= 1`` and each substep sums the series until
    the next term falls below ``tol/s`` relative to the partial sum.
    """
    B = np.asarray(B, dtype=float)
    if t == 0 or B.size == 0:
        return B.copy()
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    if A.shape[0] != A.shape[1] or A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, B {B.shape}")
    s = max(1, math.ceil(_onenorm(A) * abs(t)))
    dt = t / s
    tol_s = tol / s
    F = B
    for _ in range(s):
        acc = F.copy()
        term = F
        for k in range(1, max_terms + 1):
            term = (A @ term) * (dt / k)
            acc += term
            tn = np.linalg.norm(term)
            if tn <= tol_s * np.linalg.norm(acc) or tn == 0.0:
                break
        else:
            raise ExpActionError(f"Taylor series did not reach tol={tol:g} within {max_terms} terms")
        F = acc
    return F


def principal_log(M) -> np.ndarray:
    """Principal matrix logarithm, real for real input.

    Raises :class:`BranchCutError` if an eigenvalue sits on the closed
    negative real axis.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("principal_log needs a square matrix")
    w = np.linalg.eigvals(M)
    scale = max(np.abs(w).max(initial=0.0), 1.0)
    on_cut = (np.abs(w.imag) <= 1e-12 * scale) & (w.real <= 1e-14 * scale)
    if np.any(on_cut):
        raise BranchCutError(complex(w[on_cut][np.argmin(w[on_cut].real)]))
    L = la.logm(M, disp=False)[0]
    if np.iscomplexobj(L):
        L = L.real
    return L


def _ale_kron(A, C):
    n = A.shape[0]
    eye = np.eye(n)
    K = np.kron(eye, A) + np.kron(A, eye)
    q = np.linalg.solve(K, -C.reshape(-1, order="F"))
    return q.reshape(n, n, order="F")


def solve_ale(A, C) -> np.ndarray:
    """Solve ``A Q + Q A^T + C = 0`` for symmetric ``Q``.

    Direct Kronecker solve for n <= 50, Bartels-Stewart above.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or C.shape != (n, n):
        raise ValueError(f"shape mismatch: A {A.shape}, C {C.shape}")
    if n == 0:
        return np.zeros((0, 0))
    w = np.linalg.eigvals(A)
    gap = np.abs(w[:, None] + w[None, :]).min()
    if gap <= 1e-12 * max(np.abs(w).max(), 1.0):
        raise LyapunovSolvabilityError(f"A and -A share an eigenvalue (min |l_i + l_j| = {gap:.3g})")
    C = 0.5 * (C + C.T)
    if n <= KRONECKER_MAX_N:
        Q = _ale_kron(A, C)
    else:
        Q = la.solve_continuous_lyapunov(A, -C)
    return 0.5 * (Q + Q.T)


def psd_factor(Q, tol: float = 1e-8) -> np.ndarray:
    """Factor a symmetric, nearly PSD matrix as ``Z @ Z.T``.

    Negative eigenvalues down to ``-100*tol*||Q||_2`` are clipped; smaller
    positive eigenvalues are dropped while the Frobenius error stays within
    ``tol*||Q||_F``. Columns come out in decreasing eigenvalue order.
    """
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    if Q.shape != (n, n):
        raise ValueError("psd_factor needs a square matrix")
    Q = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(Q)
    norm2 = np.abs(w).max(initial=0.0)
    if norm2 == 0.0:
        return np.zeros((n, 0))
    if w[0] < -100 * tol * norm2:
        raise IndefiniteMatrixError(
            f"matrix is strongly indefinite: eigenvalue {w[0]:.6g} vs norm {norm2:.6g}"
        )
    w = np.clip(w, 0.0, None)[::-1]
    V = V[:, ::-1]
    k = _rank_for_budget(w, tol * np.linalg.norm(Q))
    return V[:, :k] * np.sqrt(w[:k])


def _rank_for_budget(eigs, budget) -> int:
    # eigs sorted descending and nonnegative; smallest k with ||tail||_2 <= budget
    tail = np.sqrt(np.cumsum((eigs**2)[::-1]))[::-1]
    over = np.flatnonzero(tail > budget)
    return int(over[-1] + 1) if over.size else 0


def compress_columns(Z, tol: float = 1e-8, max_rank: int | None = DEFAULT_MAX_RANK) -> np.ndarray:
    """Shrink a factor to the fewest columns keeping ``||Z'Z'^T - ZZ^T||_F <= tol*||ZZ^T||_F``.

    QR followed by an SVD of the triangular factor. If the minimal rank
    still exceeds ``max_rank`` the factor is truncated to ``max_rank``.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValueError("factor must be 2-D")
    if Z.shape[1] == 0:
        return Z.copy()
    Q, R = np.linalg.qr(Z, mode="reduced")
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    eig = s**2
    total = np.sqrt(np.sum(eig**2))
    if total == 0.0:
        return np.zeros((Z.shape[0], 0))
    k = _rank_for_budget(eig, tol * total)
    if max_rank is not None:
        k = min(k, max_rank)
    return (Q @ U[:, :k]) * s[:k]


def minimal_rank(Z, tol: float = 1e-8) -> int:
    """Rank :func:`compress_columns` would keep without a cap."""
    if Z.shape[1] == 0:
        return 0
    s = np.linalg.svd(Z, compute_uv=False)
    eig = s**2
    return _rank_for_budget(eig, tol * np.sqrt(np.sum(eig**2)))


def factor_downdate(Z, m, tol: float = 1e-10) -> np.ndarray:
    """Factor of ``Z Z^T - m m^T``, negative directions clipped.

    Used to turn a second-moment factor into a covariance factor.
    """
    Z = np.asarray(Z, dtype=float)
    m = np.asarray(m, dtype=float).reshape(-1, 1)
    W = np.hstack([Z, m])
    Q, R = np.linalg.qr(W, mode="reduced")
    Rz, rm = R[:, :-1], R[:, -1:]
    core = Rz @ Rz.T - rm @ rm.T
    w, V = np.linalg.eigh(0.5 * (core + core.T))
    w = np.clip(w, 0.0, None)[::-1]
    V = V[:, ::-1]
    # budget relative to ZZ^T: cancellation leaves roundoff-sized directions
    k = _rank_for_budget(w, tol * np.linalg.norm(Rz @ Rz.T))
    return (Q @ V[:, :k]) * np.sqrt(w[:k])


def relative_frobenius(X, Y) -> float:
    ref = np.linalg.norm(Y)
    diff = np.linalg.norm(np.asarray(X) - np.asarray(Y))
    if ref == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return float(diff / ref)


def append_columns(G, V, tol: float = 1e-8, max_rank: int | None = DEFAULT_MAX_RANK) -> np.ndarray:
    """Compressed factor of ``G G^T + V V^T`` when ``G`` has orthogonal columns.

    ``G`` must come from :func:`compress_columns` or this function. Only
    the new block is orthogonalised, so the cost is linear in ``G``'s rank.
    """
    G = np.asarray(G, dtype=float)
    V = np.asarray(V, dtype=float)
    if G.shape[1] == 0:
        return compress_columns(V, tol, max_rank)
    if V.shape[1] == 0:
        return G.copy()
    s = np.linalg.norm(G, axis=0)
    live = s > 0
    G, s = G[:, live], s[live]
    U = G / s
    C = U.T @ V
    Res = V - U @ C
    # second Gram-Schmidt pass keeps the basis orthogonal over many updates
    C2 = U.T @ Res
    Res -= U @ C2
    C += C2
    Qr, Rr = np.linalg.qr(Res, mode="reduced")
    k, q = s.size, V.shape[1]
    core = np.zeros((k + Rr.shape[0], k + q))
    core[:k, :k] = np.diag(s)
    core[:k, k:] = C
    core[k:, k:] = Rr
    W, sv, _ = np.linalg.svd(core, full_matrices=False)
    eig = sv**2
    total = np.sqrt(np.sum(eig**2))
    if total == 0.0:
        return np.zeros((G.shape[0], 0))
    r = _rank_for_budget(eig, tol * total)
    if max_rank is not None:
        r = min(r, max_rank)
    basis = np.hstack([U, Qr])
    return (basis @ W[:, :r]) * sv[:r]
