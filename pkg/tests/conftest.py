import numpy as np
import scipy.linalg as la

from nino.linalg import solve_ale


def stable(n, seed, margin=0.3):
    M = np.random.default_rng(seed).standard_normal((n, n))
    return M - (np.abs(np.linalg.eigvals(M)).max() + margin) * np.eye(n)


def twin_drift(n, seed, lo=0.3, hi=1.5, rotation=0.3):
    """Stable drift with decay rates in [lo, hi] plus a skew part."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    M = rng.standard_normal((n, n)) * rotation
    return Q @ np.diag(-np.linspace(lo, hi, n)) @ Q.T + (M - M.T) / 2


def ou_series(A, B, dt, n_samples, seed):
    """Exact discrete-time samples of dx = A x dt + B dW started from its stationary law."""
    n = A.shape[0]
    P = solve_ale(A, B @ B.T)
    E = la.expm(A * dt)
    L = np.linalg.cholesky(P - E @ P @ E.T + 1e-15 * np.eye(n))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_samples, n)) @ L.T
    x = np.linalg.cholesky(P) @ rng.standard_normal(n)
    out = np.empty((n_samples, n))
    for k in range(n_samples):
        out[k] = x
        x = E @ x + noise[k]
    return out


def strong_order(step, a=1.5, b=1.0, T=1.0, x0=1.0, n_paths=4000, levels=(4, 5, 6, 7, 8), seed=3):
    """Observed strong order on geometric Brownian motion, common random numbers.

    Coarse increments aggregate the finest ones; dZ over a coarse step is the
    sum of the fine dZ plus the fine step times W at each fine start.
    """
    from nino.operators import OperatorSet
    from nino.paths import NoiseIncrements

    ops = OperatorSet("multiplicative", [[a]], S1=[[b]])
    top = max(levels)
    hf = T / 2**top
    u = np.random.default_rng(seed).standard_normal((2, n_paths, 2**top))
    dWf, dZf = NoiseIncrements.pair_from_normals(u[0], u[1], hf)
    exact = x0 * np.exp((a - b * b / 2) * T + b * dWf.sum(1))
    errs = []
    for k in levels:
        m, h = 2 ** (top - k), T / 2**k
        x = np.full((n_paths, 1), x0)
        for j in range(2**k):
            w, z = dWf[:, j * m:(j + 1) * m], dZf[:, j * m:(j + 1) * m]
            w_start = np.cumsum(w, 1) - w
            x = step(ops, x, h, NoiseIncrements(dW1=w.sum(1), dZ1=(z + w_start * hf).sum(1)))
        errs.append(np.mean(np.abs(x[:, 0] - exact)))
    hs = T / 2.0 ** np.asarray(levels)
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0]), errs
