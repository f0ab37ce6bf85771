import dataclasses

import numpy as np
import pytest

from nino.bench import BenchRecord, find_crossover, parse_sizes, read_records, run_benchmark, write_records
from nino.scenario import ScenarioConfig, scenario_operators


def build(cfg, model):
    return scenario_operators(cfg)[0]


BASE = ScenarioConfig(kl_modes=4)


def test_parse_sizes():
    assert parse_sizes("8x4, 16X8") == [(8, 4), (16, 8)]
    with pytest.raises(ValueError, match="sorted ascending"):
        parse_sizes("16x8,8x4")
    with pytest.raises(ValueError, match="NXxNY"):
        parse_sizes("8by4")


def test_single_cell_and_reps():
    lines = []
    recs = run_benchmark([(6, 3)], ["mean-cov"], "additive-spde", BASE, build, reps=3, steps=3, log=lines.append)
    assert len(recs) == 1
    r = recs[0]
    assert r.seconds_per_step > 0 and r.min_seconds_per_step <= r.seconds_per_step <= r.max_seconds_per_step
    assert len(lines) == 1 and "min" in lines[0] and "max" in lines[0]
    with pytest.raises(ValueError, match="incompatib"):
        run_benchmark([(6, 3)], ["rk4"], "additive-spde", BASE, build)


def test_csv_sorted_by_size_then_method(tmp_path):
    recs = run_benchmark([(4, 2), (6, 3)], ["mean-cov", "galerkin"], "additive-spde", BASE, build, reps=1, steps=2,
                         method_opts={"n_slabs": 2})
    write_records(list(reversed(recs)), tmp_path / "b.csv")
    back = read_records(tmp_path / "b.csv")
    assert [(r.n, r.method) for r in back] == [(8, "galerkin"), (8, "mean-cov"), (18, "galerkin"), (18, "mean-cov")]
    assert (tmp_path / "b.csv").read_text().splitlines()[0].startswith("nx,ny,n,method")


def _records(times_fast, times_slow, sizes=(8, 32, 128)):
    out = []
    for n, tf, ts in zip(sizes, times_fast, times_slow):
        out.append(BenchRecord(n, 1, "mean-cov", "additive-spde", tf, tf, tf, 1))
        out.append(BenchRecord(n, 1, "galerkin", "additive-spde", ts, ts, ts, 1))
    return out


def test_crossover_measured_extrapolated_none():
    c = find_crossover(_records([3.0, 2.0, 1.0], [1.0, 3.0, 9.0]))
    assert c.measured_n == 32 and "measured" in c.describe()
    # fast = n^0.5, slow = 0.01 n: curves meet at n = 1e4
    n = np.array([8.0, 32.0, 128.0])
    c = find_crossover(_records(n**0.5, 0.01 * n))
    assert c.measured_n is None and c.extrapolated_n == pytest.approx(1e4, rel=1e-9)
    assert c.slope_fast == pytest.approx(0.5) and c.slope_slow == pytest.approx(1.0)
    c = find_crossover(_records(n, 0.1 * n**0.5))
    assert c.measured_n is None and c.extrapolated_n is None and "no crossover" in c.describe()
    with pytest.raises(ValueError):
        find_crossover(_records([1.0], [2.0], sizes=(8,)))
