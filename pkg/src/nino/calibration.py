"""Estimate drift and noise operators from an observed anomaly time series.

The ensemble average in the lag covariances is realised as a time average
over a single trajectory, which assumes the series is stationary and
ergodic. Snapshots are treated as anomalies: no mean is removed.
"""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .linalg import BranchCutError, IndefiniteMatrixError, exp_action, principal_log, psd_factor
from .operators import OperatorSet


class SeriesTooShortError(ValueError):
    pass


class CalibrationWarning(UserWarning):
    pass


def lag_covariances(X, tau_steps: int = 1):
    """Time-averaged ``<x(t) x(t)^T>`` and ``<x(t+tau) x(t)^T>``.

    Both averages run over the same ``nt - tau_steps`` start times, so a
    two-snapshot series with ``tau_steps=1`` uses the single available pair.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("series must be a 2-D (n_times, n_features) array")
    if tau_steps < 1:
        raise ValueError("tau_steps must be >= 1")
    nt = X.shape[0]
    if nt < tau_steps + 1:
        raise SeriesTooShortError(f"series too short: {nt} snapshots for a lag of {tau_steps} steps")
    head = X[: nt - tau_steps]
    tail = X[tau_steps:]
    m = head.shape[0]
    C0 = head.T @ head / m
    C0 = 0.5 * (C0 + C0.T)
    Ctau = tail.T @ head / m
    return C0, Ctau


def default_ridge(C0) -> float:
    n = C0.shape[0]
    return 1e-10 * float(np.trace(C0)) / n if n else 0.0


def estimate_drift(C0, Ctau, tau: float, ridge: float | None = None) -> np.ndarray:
    """Drift from the lag-``tau`` propagator ``G = Ctau (C0 + ridge I)^-1``: ``A = log(G) / tau``."""
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    Ctau = np.atleast_2d(np.asarray(Ctau, dtype=float))
    if tau <= 0:
        raise ValueError("tau must be positive")
    if ridge is None:
        ridge = default_ridge(C0)
    n = C0.shape[0]
    G = np.linalg.solve((C0 + ridge * np.eye(n)).T, Ctau.T).T
    try:
        return principal_log(G) / tau
    except BranchCutError as exc:
        raise BranchCutError(exc.eigenvalue, "raise the ridge or project onto fewer leading EOFs") from None


def _warn_unless_hurwitz(A):
    lead = np.linalg.eigvals(A).real.max(initial=-np.inf)
    if lead >= 0:
        warnings.warn(f"drift is not Hurwitz (max Re eig = {lead:.4g}); noise estimate may be meaningless",
                      CalibrationWarning, stacklevel=3)


def estimate_additive_noise(A, C0, tol: float = 1e-8) -> np.ndarray:
    """Noise factor ``S`` from the stationary balance ``A C0 + C0 A^T + S S^T = 0``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    _warn_unless_hurwitz(A)
    forcing = -(A @ C0 + C0 @ A.T)
    try:
        return psd_factor(forcing, tol)
    except IndefiniteMatrixError as exc:
        raise IndefiniteMatrixError(f"{exc}; project the data onto fewer leading EOFs") from None


def _best_sigma2(R, C0, rtol=1e-14):
    # minimise ||R + s C0||_F over s >= 0 by bisection on the (increasing) derivative
    g = lambda s: np.vdot(R, C0) + s * np.vdot(C0, C0)
    if g(0.0) >= 0:
        return 0.0
    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
    lo = 0.0
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def estimate_multiplicative_noise(A, C0, kind: str = "multiplicative", theta: float = 0.5,
                                  tol: float = 1e-8) -> OperatorSet:
    """Scalar multiplicative intensity ``S1 = sigma I`` fitted to the stationary balance.

    For ``kind="multiplicative"``, ``sigma^2`` minimises
    ``||A C0 + C0 A^T + sigma^2 C0||_F``. For ``kind="mixed"`` the
    multiplicative share is ``theta * sigma^2`` and the remaining stationary
    forcing is factored into the additive noise ``S``.

    Falls back to a purely additive model, with a warning, when no positive
    ``sigma`` reduces the residual.
    """
    if kind not in ("multiplicative", "mixed"):
        raise ValueError("kind must be 'multiplicative' or 'mixed'")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    _warn_unless_hurwitz(A)
    n = A.shape[0]
    R = A @ C0 + C0 @ A.T
    s2 = _best_sigma2(R, C0)
    if s2 <= 0.0:
        warnings.warn("no multiplicative intensity reduces the stationary residual; using the additive model",
                      CalibrationWarning, stacklevel=2)
        return OperatorSet("additive", A, S=estimate_additive_noise(A, C0, tol))
    if kind == "multiplicative":
        return OperatorSet("multiplicative", A, S1=np.sqrt(s2) * np.eye(n))
    s2 *= theta
    S2 = psd_factor(-(R + s2 * C0), tol)
    return OperatorSet("mixed", A, S=S2, S1=np.sqrt(s2) * np.eye(n))


class LinearInverseModel(TransformerMixin, BaseEstimator):
    """Fit ``dx = A x dt + noise`` to snapshots of a gridded anomaly series.

    Parameters
    ----------
    kind : {"additive", "multiplicative", "mixed"}
        Noise model to calibrate.
    lag : int
        Lag, in snapshots, of the propagator used for the drift.
    dt : float
        Spacing of the snapshots in days.
    n_eofs : int or None
        Project onto this many leading EOFs before fitting (capped at the
        number of features). ``None`` fits in the full grid space.
    ridge : float or None
        Tikhonov shift on ``C0`` before inversion; ``None`` uses
        ``1e-10 * trace(C0) / n``.
    theta : float
        Multiplicative share of the stationary forcing for ``kind="mixed"``.

    Attributes
    ----------
    eofs_ : ndarray of shape (n_features, k) or None
    C0_, Ctau_ : ndarray of shape (k, k)
    A_ : ndarray of shape (k, k)
    operators_ : OperatorSet
    """

    def __init__(self, kind="additive", lag=1, dt=1.0, n_eofs=50, ridge=None, theta=0.5, noise_tol=1e-8):
        self.kind = kind
        self.lag = lag
        self.dt = dt
        self.n_eofs = n_eofs
        self.ridge = ridge
        self.theta = theta
        self.noise_tol = noise_tol

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        if X.shape[0] < max(3, self.lag + 2):
            raise SeriesTooShortError(
                f"series too short: {X.shape[0]} snapshots, need at least {max(3, self.lag + 2)}"
            )
        n_features = X.shape[1]
        if self.n_eofs is None:
            self.eofs_ = None
            Y = X
        else:
            k = min(int(self.n_eofs), n_features)
            C = X.T @ X / X.shape[0]
            w, V = np.linalg.eigh(0.5 * (C + C.T))
            self.eofs_ = V[:, ::-1][:, :k]
            self.eof_variance_ = w[::-1][:k]
            Y = X @ self.eofs_
        tau = self.lag * self.dt
        self.C0_, self.Ctau_ = lag_covariances(Y, self.lag)
        self.A_ = estimate_drift(self.C0_, self.Ctau_, tau, self.ridge)
        if self.kind == "additive":
            ops = OperatorSet("additive", self.A_, S=estimate_additive_noise(self.A_, self.C0_, self.noise_tol))
        else:
            ops = estimate_multiplicative_noise(self.A_, self.C0_, self.kind, self.theta, self.noise_tol)
        self.operators_ = OperatorSet(ops.kind, ops.A, S=ops.S, S1=ops.S1, lag_tau=tau, basis=self.eofs_)
        self.n_features_in_ = n_features
        return self

    def transform(self, X):
        check_is_fitted(self, "A_")
        X = check_array(X)
        return X if self.eofs_ is None else X @ self.eofs_

    def inverse_transform(self, Y):
        check_is_fitted(self, "A_")
        Y = check_array(Y)
        return Y if self.eofs_ is None else Y @ self.eofs_.T

    def predict(self, X, lead=None):
        """Most probable state ``expm(A * lead) x`` for each row of ``X`` (lead in days)."""
        check_is_fitted(self, "A_")
        lead = self.lag * self.dt if lead is None else lead
        Y = self.transform(X)
        return self.inverse_transform(exp_action(self.A_, Y.T, lead).T)
