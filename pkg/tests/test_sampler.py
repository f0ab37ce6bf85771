import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from nino.grid import EmptyMaskError, Grid, RegionMask
from nino.linalg import relative_frobenius
from nino.sampler import (RealizationRequest, TimeAlignmentError, align_times, read_error_csv, read_pgm16,
                          sample_realizations, score_against_reference, write_pgm16, write_text_matrix)


def grid():
    return Grid(4, 3, 0, 3, 0, 2)


def test_zero_noise_and_rank_zero_return_mean():
    mean = np.random.default_rng(0).standard_normal((3, 5))
    Z = [np.ones((5, 2))] * 3
    out = sample_realizations(RealizationRequest(mean, Z, count=4), zero_noise=True)
    np.testing.assert_array_equal(out, np.broadcast_to(mean, (4, 3, 5)))
    out = sample_realizations(RealizationRequest(mean, [np.zeros((5, 0))] * 3, count=2))
    np.testing.assert_array_equal(out, np.broadcast_to(mean, (2, 3, 5)))


def test_request_validation():
    with pytest.raises(ValueError, match="dimension mismatch"):
        RealizationRequest(np.zeros((2, 3)), [np.zeros((3, 1)), np.zeros((4, 1))])
    with pytest.raises(ValueError):
        RealizationRequest(np.zeros((2, 3)), [np.zeros((3, 1))])
    with pytest.raises(ValueError):
        RealizationRequest(np.zeros((1, 3)), [np.zeros((3, 1))], count=0)


def test_sample_covariance_matches_factor():
    Z = np.random.default_rng(1).standard_normal((6, 3))
    out = sample_realizations(RealizationRequest(np.zeros((1, 6)), [Z], seed=2, count=10_000))
    assert relative_frobenius(np.cov(out[:, 0].T), Z @ Z.T) < 0.05


def test_fresh_draw_each_step_and_determinism():
    Z = np.eye(2)
    req = RealizationRequest(np.zeros((2, 2)), [Z, Z], seed=3, count=5000)
    a = sample_realizations(req)
    np.testing.assert_array_equal(a, sample_realizations(req))
    corr = np.corrcoef(a[:, 0, 0], a[:, 1, 0])[0, 1]
    assert abs(corr) < 4 / np.sqrt(5000)


@settings(max_examples=10, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1))
def test_orthogonal_factor_rotation_leaves_moments(seed):
    # one chi-square test of the mean at the 3-sigma level (p = 0.0027) instead of
    # per-component bands, so the false-alarm rate does not grow with the dimension
    rng = np.random.default_rng(seed)
    n, r, count = 4, 3, 10_000
    Z = rng.standard_normal((n, r)) + np.eye(n, r)
    U, _ = np.linalg.qr(rng.standard_normal((r, r)))
    m = rng.standard_normal((1, n))
    P = Z @ Z.T
    limit = chi2.ppf(1 - 0.0027, r)
    for factor in (Z, Z @ U):
        out = sample_realizations(RealizationRequest(m, [factor], seed=seed + 1, count=count))[:, 0]
        d = out.mean(0) - m[0]
        assert count * d @ np.linalg.pinv(P) @ d < limit
        assert relative_frobenius(np.cov(out.T), P) < 0.05


def test_score_examples():
    g = grid()
    mask = RegionMask.whole(g)
    rng = np.random.default_rng(4)
    ref = rng.standard_normal((5, g.size))
    t = np.arange(5) * 0.5
    rep = score_against_reference(ref[None], t, ref, t, mask)
    np.testing.assert_array_equal(rep.err_mean, 0.0)
    np.testing.assert_array_equal(rep.rel_l2, 0.0)
    rep = score_against_reference(ref[None] + 1.0, t, ref, t, mask)
    np.testing.assert_allclose(rep.err_mean, -1.0)
    rep = score_against_reference(np.stack([ref + 0.3, ref - 0.3]), t, ref, t, mask)
    np.testing.assert_allclose(rep.err_mean, 0.0, atol=1e-15)
    np.testing.assert_allclose(rep.rel_l2, 0.0, atol=1e-15)
    assert rep.n == 2


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(-5, 5))
def test_err_linear_in_reference(seed, c):
    g = grid()
    mask = RegionMask(g, 1, 2, 0, 1)
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((3, g.size))
    sims = rng.standard_normal((4, 3, g.size))
    t = np.arange(3.0)
    base = score_against_reference(sims, t, ref, t, mask).err_mean
    shifted = score_against_reference(sims, t, ref + c, t, mask).err_mean
    np.testing.assert_allclose(shifted, base + c, atol=1e-12)


def test_time_alignment():
    np.testing.assert_array_equal(align_times([0.0, 0.5, 1.0], [0.0, 0.5, 1.0, 1.5]), [0, 1, 2])
    np.testing.assert_array_equal(align_times([0.0, 0.5, 1.0], [0.0, 1.0], h=1.0), [0, 0, 1])
    with pytest.raises(TimeAlignmentError, match="misalignment"):
        align_times([0.0, 0.5, 5.0], [0.0, 0.5, 1.0])


def test_score_rejects_empty_mask():
    g = grid()
    mask = RegionMask(g, 50, 60, 50, 60)
    with pytest.raises(EmptyMaskError):
        score_against_reference(np.zeros((1, 1, g.size)), [0.0], np.zeros((1, g.size)), [0.0], mask)


def test_standard_errors_and_csv(tmp_path):
    g = grid()
    mask = RegionMask.whole(g)
    rng = np.random.default_rng(5)
    sims = rng.standard_normal((10, 3, g.size))
    t = np.arange(3.0)
    rep = score_against_reference(sims, t, np.zeros((3, g.size)), t, mask)
    se = rep.standard_errors(sims[:, :, mask.indices])
    np.testing.assert_allclose(se, sims.mean(2).std(0, ddof=1) / np.sqrt(10))
    rep.write_csv(tmp_path / "err.csv")
    assert (tmp_path / "err.csv").read_text().splitlines()[0] == "time_days,err_mean_degC,rel_l2"
    times, err, rel = read_error_csv(tmp_path / "err.csv")
    np.testing.assert_array_equal(err, rep.err_mean)
    np.testing.assert_array_equal(rel, rep.rel_l2)


def test_heatmap_dumps(tmp_path):
    M = np.array([[-1.5, 0.0, 2.0], [0.25, 1.0, -0.75]])
    write_text_matrix(M, tmp_path / "m.txt")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "m.txt"), M)
    vmin, vmax = write_pgm16(M, tmp_path / "m.pgm")
    assert (vmin, vmax) == (-1.5, 2.0)
    head = (tmp_path / "m.pgm").read_bytes()[:80]
    assert head.startswith(b"P5\n# vmin=-1.5 vmax=2.0")
    np.testing.assert_allclose(read_pgm16(tmp_path / "m.pgm"), M, atol=3.5 / 65535)
    with pytest.raises(ValueError):
        write_pgm16(np.array([[np.nan]]), tmp_path / "x.pgm")
