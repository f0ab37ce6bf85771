"""Per-step timing of the simulation methods over a sequence of grid sizes."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from .scenario import ScenarioConfig, gaussian_bump
from .simulators import METHODS, make_simulator


@dataclass
class BenchRecord:
    nx: int
    ny: int
    method: str
    model: str
    seconds_per_step: float
    min_seconds_per_step: float
    max_seconds_per_step: float
    size_metric: int

    @property
    def n(self) -> int:
        return self.nx * self.ny


FIELDS = ["nx", "ny", "n", "method", "model", "seconds_per_step", "min_seconds_per_step",
          "max_seconds_per_step", "size_metric"]


def parse_sizes(text: str) -> list[tuple[int, int]]:
    """``"8x4,16x8"`` to ``[(8, 4), (16, 8)]``; sizes must ascend."""
    sizes = []
    for item in text.split(","):
        try:
            nx, ny = (int(v) for v in item.lower().strip().split("x"))
        except ValueError:
            raise ValueError(f"bad grid size {item!r}; expected NXxNY") from None
        sizes.append((nx, ny))
    counts = [nx * ny for nx, ny in sizes]
    if counts != sorted(counts):
        raise ValueError("benchmark sizes must be sorted ascending")
    return sizes


def _time_run(sim, ops, x0, steps):
    # setup and the first step are excluded by differencing against a one-step run
    sim.set_params(n_steps=1).fit(ops)
    t0 = time.perf_counter()
    sim.simulate(x0)
    one = time.perf_counter() - t0
    sim.set_params(n_steps=steps + 1).fit(ops)
    t0 = time.perf_counter()
    res = sim.simulate(x0)
    full = time.perf_counter() - t0
    return max(full - one, 1e-9) / steps, res.size_metric


def run_benchmark(sizes, methods, model: str, base: ScenarioConfig, build_ops, reps: int = 3, steps: int = 100,
                  h: float = 0.5, n_paths: int = 50, method_opts=None, log=None) -> list[BenchRecord]:
    """Median-of-``reps`` seconds per step for every (size, method) cell.

    ``build_ops(cfg, model)`` returns the operator set for a scenario config.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"method/model incompatibility: unknown method(s) {unknown}")
    if reps < 1 or steps < 1:
        raise ValueError("reps and steps must be >= 1")
    records = []
    for nx, ny in sizes:
        cfg = replace(base, nx=nx, ny=ny)
        ops = build_ops(cfg, model)
        x0 = ops.reduce(gaussian_bump(cfg.grid, cfg.init_amplitude))
        for method in sorted(methods):
            sim = make_simulator(method, h, steps, n_paths, **(method_opts or {}))
            times, metric = [], 0
            for _ in range(reps):
                t, metric = _time_run(sim, ops, x0, steps)
                times.append(t)
            rec = BenchRecord(nx, ny, method, model, float(np.median(times)), min(times), max(times), int(metric))
            if log:
                log(f"{nx}x{ny} {method}: median {rec.seconds_per_step * 100:.4g} s/100 steps "
                    f"(min {rec.min_seconds_per_step * 100:.4g}, max {rec.max_seconds_per_step * 100:.4g})")
            records.append(rec)
    return records


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for r in sorted(records, key=lambda r: (r.n, r.method)):
            w.writerow([r.nx, r.ny, r.n, r.method, r.model, repr(r.seconds_per_step),
                        repr(r.min_seconds_per_step), repr(r.max_seconds_per_step), r.size_metric])


def read_records(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchRecord(int(r["nx"]), int(r["ny"]), r["method"], r["model"], float(r["seconds_per_step"]),
                        float(r["min_seconds_per_step"]), float(r["max_seconds_per_step"]), int(r["size_metric"]))
            for r in rows]


@dataclass
class Crossover:
    """Log-log growth of two methods' per-step time against the state size."""

    fast: str
    slow: str
    slope_fast: float
    slope_slow: float
    measured_n: int | None
    extrapolated_n: float | None

    def describe(self) -> str:
        grow = (f"{self.fast} per-step time grows as n^{self.slope_fast:.2f}, "
                f"{self.slow} as n^{self.slope_slow:.2f}")
        if self.measured_n is not None:
            return f"{grow}; {self.fast} is faster from n = {self.measured_n} (measured crossover)"
        if self.extrapolated_n is not None:
            return f"{grow}; extrapolated crossover at n = {self.extrapolated_n:.4g}"
        return f"{grow}; no crossover (growth rates do not favour {self.fast})"


def find_crossover(records, fast: str = "mean-cov", slow: str = "galerkin") -> Crossover:
    """Smallest measured size where ``fast`` beats ``slow``, else the intersection of the log-log fits."""
    def series(method):
        rs = sorted((r for r in records if r.method == method), key=lambda r: r.n)
        return np.array([r.n for r in rs], float), np.array([r.seconds_per_step for r in rs])

    n_f, t_f = series(fast)
    n_s, t_s = series(slow)
    if n_f.size < 2 or n_s.size < 2 or not np.array_equal(n_f, n_s):
        raise ValueError("crossover needs both methods on the same two or more sizes")
    pf = np.polyfit(np.log(n_f), np.log(t_f), 1)
    ps = np.polyfit(np.log(n_s), np.log(t_s), 1)
    measured = None
    faster = t_f < t_s
    # first size from which the fast method stays ahead
    for k in range(len(n_f)):
        if faster[k:].all():
            measured = int(n_f[k])
            break
    extrap = None
    if measured is None and pf[0] < ps[0]:
        extrap = float(np.exp((pf[1] - ps[1]) / (ps[0] - pf[0])))
    return Crossover(fast, slow, float(pf[0]), float(ps[0]), measured, extrap)
