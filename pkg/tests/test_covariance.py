import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from nino.covariance import (DLEProblem, QuadratureRule, RankExplosionError, dle_additive_step, dle_strang_step,
                             propagate_mean, solve_dle)
from nino.linalg import relative_frobenius, solve_ale

from conftest import stable


def kronecker_oracle(A, P0, T, S=None, S1=None):
    """Dense DOP853 solve of the vectorised matrix ODE."""
    n = A.shape[0]
    I = np.eye(n)
    L = np.kron(I, A) + np.kron(A, I)
    if S1 is not None:
        L = L + np.kron(S1, S1)
    c = (S @ S.T).ravel() if S is not None else np.zeros(n * n)
    sol = solve_ivp(lambda t, p: L @ p + c, (0, T), P0.ravel(), method="DOP853", rtol=1e-12, atol=1e-14)
    return sol.y[:, -1].reshape(n, n)


def test_quadrature_rule_validation():
    q = QuadratureRule.gauss_legendre(4)
    assert q.weights.sum() == pytest.approx(1.0) and q.order == 8
    with pytest.raises(ValueError):
        QuadratureRule(np.array([0.6, 0.2]), np.array([0.5, 0.5]), 2)
    with pytest.raises(ValueError):
        QuadratureRule(np.array([0.5]), np.array([0.9]), 2)


def test_propagate_mean_examples():
    np.testing.assert_array_equal(propagate_mean(-np.eye(3), np.zeros(3), 0.1, 5), 0.0)
    traj = propagate_mean(sp.csr_matrix((2, 2)), np.array([1.0, 2.0]), 0.1, 5)
    np.testing.assert_array_equal(traj, np.tile([1.0, 2.0], (6, 1)))
    m = propagate_mean(np.array([[-1.0]]), np.array([1.0]), 0.01, 100)
    assert abs(m[-1, 0] - np.exp(-1)) < 1e-4


def test_additive_step_examples():
    A = stable(4, 0)
    Z0 = np.random.default_rng(1).standard_normal((4, 2))
    Z = dle_additive_step(A, np.zeros((4, 1)), Z0, 0.3, tol=1e-14)
    E = la.expm(0.3 * A)
    np.testing.assert_allclose(Z @ Z.T, E @ Z0 @ Z0.T @ E.T, atol=1e-12)
    S = np.random.default_rng(2).standard_normal((4, 2))
    Z = dle_additive_step(np.zeros((4, 4)), S, Z0, 0.3, tol=1e-14)
    np.testing.assert_allclose(Z @ Z.T, Z0 @ Z0.T + 0.3 * S @ S.T, atol=1e-12)
    z = dle_additive_step(np.array([[-1.0]]), np.array([[np.sqrt(2.0)]]), np.zeros((1, 0)), 0.1)
    assert z @ z.T == pytest.approx(1 - np.exp(-0.2), rel=1e-12)


def test_strang_step_examples():
    A = stable(3, 3)
    Z0 = np.eye(3)
    Z = dle_strang_step(A, None, None, Z0, 0.2, tol=1e-14)
    E = la.expm(0.2 * A)
    np.testing.assert_allclose(Z @ Z.T, E @ E.T, atol=1e-12)
    s1, h = 0.7, 0.1
    z = dle_strang_step(np.zeros((1, 1)), np.array([[s1]]), None, np.ones((1, 1)), h, tol=1e-15)
    assert (z @ z.T)[0, 0] == pytest.approx(1 + h * s1**2 + h**2 * s1**4 / 2, rel=1e-13)
    assert abs((z @ z.T)[0, 0] - np.exp(s1**2 * h)) < 1e-4


def test_strang_rank_explosion_advises_tolerance():
    rng = np.random.default_rng(0)
    with pytest.raises(RankExplosionError, match="larger tolerance"):
        dle_strang_step(stable(20, 1), rng.standard_normal((20, 20)), None, rng.standard_normal((20, 5)),
                        0.1, tol=1e-14, max_rank=6)


def test_strang_commuting_case_is_second_order():
    A = np.diag([-0.5, -1.0, -1.5, -0.8])
    S1 = np.diag([0.6, 0.3, 0.9, 0.5])
    P0 = np.eye(4)
    exact = kronecker_oracle(A, P0, 1.0, S1=S1)
    errs = []
    for h in (0.1, 0.05, 0.025):
        traj = solve_dle(DLEProblem(A, P0, 1.0, h, S1=S1, tol=1e-14))
        errs.append(np.linalg.norm(traj.covariance() - exact))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 3.4) & (ratios < 4.6)), ratios


def test_solve_dle_examples():
    traj = solve_dle(DLEProblem(-np.eye(3), np.zeros((3, 1)), 1.0, 0.1))
    assert all(np.abs(Z @ Z.T).max() == 0 for Z in traj.factors)
    traj = solve_dle(DLEProblem(np.array([[-1.0]]), np.zeros((1, 0)), 1.0, 0.1, S=np.array([[np.sqrt(2.0)]])))
    exact = 1 - np.exp(-2 * traj.times)
    np.testing.assert_allclose([traj.covariance(k)[0, 0] for k in range(11)], exact, atol=1e-12)
    mixed = solve_dle(DLEProblem(np.array([[-1.0]]), np.zeros((1, 0)), 40.0, 0.05,
                                 S=np.array([[1.0]]), S1=np.array([[0.5]])))
    assert abs(mixed.covariance()[0, 0] - 1 / 1.75) < 1e-3


@pytest.mark.parametrize("method", ["step", "accumulate"])
def test_additive_matches_kronecker_oracle(method):
    rng = np.random.default_rng(7)
    A = stable(6, 7)
    S = rng.standard_normal((6, 2))
    P0 = rng.standard_normal((6, 1))
    traj = solve_dle(DLEProblem(A, P0, 2.0, 0.1, S=S, tol=1e-12, method=method))
    oracle = kronecker_oracle(A, P0 @ P0.T, 2.0, S=S)
    assert relative_frobenius(traj.covariance(), oracle) < 1e-4


def test_mixed_matches_kronecker_oracle():
    rng = np.random.default_rng(8)
    A = stable(5, 8)
    S1 = 0.3 * rng.standard_normal((5, 5))
    S = rng.standard_normal((5, 2))
    traj = solve_dle(DLEProblem(A, np.eye(5), 2.0, 0.01, S=S, S1=S1, tol=1e-12))
    assert relative_frobenius(traj.covariance(), kronecker_oracle(A, np.eye(5), 2.0, S=S, S1=S1)) < 1e-4


def test_stride_keeps_checkpoints_and_last_step():
    traj = solve_dle(DLEProblem(-np.eye(2), np.eye(2), 1.0, 0.1, S=np.eye(2), stride=3))
    np.testing.assert_allclose(traj.times, [0.0, 0.3, 0.6, 0.9, 1.0])
    with pytest.raises(ValueError, match="whole number"):
        DLEProblem(-np.eye(2), np.eye(2), 1.05, 0.1).n_steps


def test_problem_validation():
    with pytest.raises(ValueError):
        DLEProblem(-np.eye(2), np.eye(2), 1.0, 0.0)
    with pytest.raises(ValueError):
        DLEProblem(-np.eye(2), np.eye(2), 0.05, 0.1)
    with pytest.raises(ValueError):
        DLEProblem(-np.eye(2), np.eye(3), 1.0, 0.1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_additive_trace_monotone_to_stationary(seed, n):
    A = stable(n, seed)
    S = np.random.default_rng(seed).standard_normal((n, 2))
    rate = np.abs(np.linalg.eigvals(A).real).min()
    h = 0.5 / np.abs(np.linalg.eigvals(A)).max()
    T = h * np.ceil(10 / rate / h)
    traj = solve_dle(DLEProblem(A, np.zeros((n, 0)), T, h, S=S, tol=1e-12))
    traces = np.array([np.sum(Z * Z) for Z in traj.factors])
    assert np.all(np.diff(traces) >= -1e-10 * traces[-1])
    ale = np.trace(solve_ale(A, S @ S.T))
    assert abs(traces[-1] - ale) <= 0.01 * ale
    for Z in traj.factors[:: max(1, len(traj.factors) // 5)]:
        P = Z @ Z.T
        assert np.array_equal(P, P.T) or np.abs(P - P.T).max() <= 1e-15 * np.abs(P).max()
