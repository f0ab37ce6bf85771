import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nino.grid import Grid, VelocityField
from nino.linalg import relative_frobenius, solve_ale
from nino.operators import OperatorSet
from nino.scenario import (AnomalySeries, FormatError, ScenarioConfig, UnstableDriftError, config_from_mapping,
                           generate_synthetic_scenario, read_config, read_factor_checkpoint, read_grid_series,
                           read_operators, read_velocity, scenario_operators, write_factor_checkpoint,
                           write_grid_series, write_operators, write_velocity)


def small_series(seed=0, nt=3):
    g = Grid(4, 3, 150.0, 180.0, -5.0, 5.0)
    values = np.random.default_rng(seed).standard_normal((nt, g.size))
    return AnomalySeries(g, 0.5 * np.arange(nt) + 10.0, values)


def test_series_roundtrip_and_layout(tmp_path):
    s = small_series()
    write_grid_series(s, tmp_path / "s.ssta")
    lines = (tmp_path / "s.ssta").read_text().splitlines()
    assert lines[:4] == ["ssta-grid 1", "4 3", "150.0 180.0 -5.0 5.0", "3 0.5 10.0"]
    assert len(lines) == 4 + 3 * 3
    # first value row is the southernmost latitude
    np.testing.assert_array_equal([float(v) for v in lines[4].split()], s.values[0, :4])
    back = read_grid_series(tmp_path / "s.ssta")
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.times, s.times)
    assert back.grid == s.grid


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=12, max_size=12))
def test_series_roundtrip_is_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "s.ssta"
    s = AnomalySeries(Grid(4, 3, 0, 3, 0, 2), [0.0], [values])
    write_grid_series(s, path)
    np.testing.assert_array_equal(read_grid_series(path).values, s.values)


def _corrupt(tmp_path, edit):
    write_grid_series(small_series(), tmp_path / "s.ssta")
    lines = (tmp_path / "s.ssta").read_text().splitlines()
    (tmp_path / "bad.ssta").write_text("\n".join(edit(lines)) + "\n")
    return tmp_path / "bad.ssta"


def test_series_format_errors(tmp_path):
    with pytest.raises(FormatError, match=r"expected 3 value rows.*found|expected .* found"):
        read_grid_series(_corrupt(tmp_path, lambda ls: ls[:-4]))
    with pytest.raises(FormatError, match="unsupported version"):
        read_grid_series(_corrupt(tmp_path, lambda ls: ["ssta-grid 2"] + ls[1:]))
    with pytest.raises(FormatError, match="malformed header"):
        read_grid_series(_corrupt(tmp_path, lambda ls: ["sst 1"] + ls[1:]))
    with pytest.raises(FormatError, match=r":6:.*non-finite"):
        read_grid_series(_corrupt(tmp_path, lambda ls: ls[:5] + ["nan 1 2 3"] + ls[6:]))
    with pytest.raises(FormatError, match=r":5:.*count mismatch"):
        read_grid_series(_corrupt(tmp_path, lambda ls: ls[:4] + ["1 2 3"] + ls[5:]))


def test_truncated_error_names_counts(tmp_path):
    with pytest.raises(FormatError) as info:
        read_grid_series(_corrupt(tmp_path, lambda ls: ls[:-4]))
    assert "truncated" in str(info.value) and "9" in str(info.value)


def test_velocity_roundtrip(tmp_path):
    g = Grid(3, 2, 0, 2, 0, 1)
    rng = np.random.default_rng(1)
    vel = VelocityField(g, rng.standard_normal(6), rng.standard_normal(6))
    write_velocity(vel, tmp_path / "v.ocvel")
    assert (tmp_path / "v.ocvel").read_text().startswith("ocvel 1\n")
    back = read_velocity(tmp_path / "v.ocvel")
    np.testing.assert_array_equal(back.u_east, vel.u_east)
    np.testing.assert_array_equal(back.v_north, vel.v_north)


def test_operator_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 4))
    for ops in (OperatorSet("mixed", A, S=rng.standard_normal((4, 2)), S1=rng.standard_normal((4, 4)), lag_tau=1.5),
                OperatorSet("additive", sp.csr_matrix(A), S=np.ones((4, 1)), basis=rng.standard_normal((7, 4)))):
        write_operators(ops, tmp_path / "ops.txt")
        head = (tmp_path / "ops.txt").read_text().splitlines()[:2]
        assert head == ["nino-operators 1", f"kind {ops.kind}"]
        back = read_operators(tmp_path / "ops.txt")
        assert back.kind == ops.kind
        np.testing.assert_array_equal(back.dense_A, ops.dense_A)
        np.testing.assert_array_equal(back.S, ops.S)
        if ops.basis is not None:
            np.testing.assert_array_equal(back.basis, ops.basis)


def test_factor_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    factors = [rng.standard_normal((5, 2)), np.zeros((5, 0)), rng.standard_normal((5, 3))]
    mean = rng.standard_normal((3, 5))
    write_factor_checkpoint([0.0, 0.5, 1.0], mean, factors, tmp_path / "f.txt")
    times, m, back = read_factor_checkpoint(tmp_path / "f.txt")
    np.testing.assert_array_equal(times, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(m, mean)
    for a, b in zip(factors, back):
        np.testing.assert_array_equal(a, b)


def test_config_parsing(tmp_path):
    (tmp_path / "c.cfg").write_text("# scenario\nnx = 8\nny=4  # inline\nseed = 3\nextra = ignored\n")
    values = read_config(tmp_path / "c.cfg")
    cfg = config_from_mapping(values, required=("nx", "ny", "seed"))
    assert (cfg.nx, cfg.ny, cfg.seed) == (8, 4, 3)
    with pytest.raises(KeyError, match="missing config key: gamma"):
        config_from_mapping(values, required=("gamma",))
    with pytest.raises(ValueError, match="nx"):
        config_from_mapping({"nx": "8.5"})
    (tmp_path / "bad.cfg").write_text("nx 8\n")
    with pytest.raises(FormatError, match=":1:"):
        read_config(tmp_path / "bad.cfg")
    assert "length_scale" in ScenarioConfig.keys()


def test_zero_flow_zero_noise_decays_exponentially():
    cfg = ScenarioConfig(nx=4, ny=3, U=0.0, gamma=1.0, Q=0.0, n_steps=20, sample_every=1, dt=0.1)
    series, _, _ = generate_synthetic_scenario(cfg)
    x0 = series.values[0]
    # Taylor 1.5 on x' = -x gives the factor 1 - h + h^2/2 per step
    np.testing.assert_allclose(series.values[-1], x0 * (1 - 0.1 + 0.005) ** 20, rtol=1e-12)
    assert np.abs(series.values[-1]).max() < np.exp(-1.9) * np.abs(x0).max()


def test_generation_is_deterministic_and_sampled():
    cfg = ScenarioConfig(nx=6, ny=3, n_steps=40, sample_every=4, burn_in=8, seed=5)
    a, _, _ = generate_synthetic_scenario(cfg)
    b, _, _ = generate_synthetic_scenario(cfg)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_allclose(a.times, 0.5 * (8 + 4 * np.arange(11)))
    c, _, _ = generate_synthetic_scenario(dataclasses.replace(cfg, seed=6))
    assert not np.array_equal(a.values, c.values)


def test_unstable_drift_is_reported():
    cfg = ScenarioConfig(nx=6, ny=4, gamma=0.0, bc="periodic-lon", U=0.5)
    with pytest.raises(UnstableDriftError, match="gamma"):
        scenario_operators(cfg)


@pytest.mark.slow
def test_stationary_covariance_matches_lyapunov():
    cfg = ScenarioConfig(nx=8, ny=4, n_steps=100_000, sample_every=1, burn_in=200, seed=1)
    series, _, ops = generate_synthetic_scenario(cfg)
    P = solve_ale(ops.dense_A, ops.S @ ops.S.T)
    assert relative_frobenius(np.cov(series.values.T), P) < 0.15
