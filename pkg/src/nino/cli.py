"""Command line: ``nino generate|fit|simulate|compare|benchmark``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from . import bench
from .calibration import LinearInverseModel, SeriesTooShortError
from .covariance import RankExplosionError
from .galerkin import KernelSpec, NonPSDKernelError, kl_eigenpairs
from .grid import (EmptyMaskError, GridMismatchError, RegionMask, SingularSystemError,
                   assemble_transport_operator)
from .linalg import (BranchCutError, ExpActionError, IndefiniteMatrixError, LyapunovSolvabilityError,
                     relative_frobenius)
from .operators import OperatorSet
from .paths import run_ensemble
from .sampler import TimeAlignmentError, score_against_reference, write_pgm16, write_text_matrix
from .scenario import (AnomalySeries, FormatError, ScenarioConfig, UnstableDriftError, config_from_mapping,
                       gaussian_bump, generate_synthetic_scenario, read_config, read_grid_series,
                       read_operators, read_velocity, scenario_operators, write_grid_series, write_operators,
                       write_velocity)
from .simulators import METHODS, final_covariance, make_simulator

MODELS = tuple(f"{k}-{t}" for t in ("sde", "spde") for k in ("additive", "mult", "mixed"))
KIND_OF = {"additive": "additive", "mult": "multiplicative", "mixed": "mixed"}
GALERKIN_MEMORY = 2e8  # bytes of saved chaos modes

NUMERICAL_ERRORS = (BranchCutError, IndefiniteMatrixError, RankExplosionError, SingularSystemError,
                    ExpActionError, LyapunovSolvabilityError, UnstableDriftError, NonPSDKernelError,
                    FloatingPointError, np.linalg.LinAlgError, OverflowError, MemoryError)
DATA_ERRORS = (FormatError, SeriesTooShortError, GridMismatchError, EmptyMaskError, TimeAlignmentError,
               KeyError, FileNotFoundError, IsADirectoryError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nino", description="Mean/covariance, Galerkin and path simulation of linear SST-anomaly models")
    p.add_argument("command", choices=["generate", "fit", "simulate", "compare", "benchmark"])
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--model", choices=MODELS, help="model family")
    p.add_argument("--method", choices=METHODS, help="simulation method")
    p.add_argument("--h", type=float, help="time step in days")
    p.add_argument("--steps", type=int, help="number of time steps")
    p.add_argument("--paths", type=int, help="realizations or Monte Carlo paths")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="cap on BLAS/LAPACK worker threads")
    p.add_argument("--out", help="output file or directory")
    return p


class Settings:
    """Config file values with command-line overrides; paths resolve relative to the config file."""

    def __init__(self, args):
        self.base = Path(args.config).resolve().parent if args.config else Path.cwd()
        self.values = read_config(args.config) if args.config else {}
        for flag, key in (("model", "model"), ("method", "method"), ("h", "h"), ("steps", "steps"),
                          ("paths", "paths"), ("seed", "seed")):
            if getattr(args, flag) is not None:
                self.values[key] = str(getattr(args, flag))
        self.out = args.out

    def get(self, key, default=None, cast=str):
        if key not in self.values:
            return default
        try:
            return cast(self.values[key])
        except ValueError:
            raise ValueError(f"config key {key}: cannot parse {self.values[key]!r}") from None

    def require(self, key, cast=str):
        if key not in self.values:
            raise KeyError(f"missing config key: {key}")
        return self.get(key, cast=cast)

    def path(self, key):
        return self.base / self.values[key] if key in self.values else None

    def scenario(self, required=()) -> ScenarioConfig:
        return config_from_mapping(self.values, required)

    def output(self) -> Path:
        if not self.out:
            raise UsageError("--out is required for this command")
        return Path(self.out)


def _say(msg):
    print(msg, flush=True)


def cmd_generate(s: Settings) -> int:
    cfg = s.scenario(required=("nx", "ny", "seed"))
    out = s.output()
    out.mkdir(parents=True, exist_ok=True)
    series, vel, ops = generate_synthetic_scenario(cfg)
    write_grid_series(series, out / "series.ssta")
    write_velocity(vel, out / "velocity.ocvel")
    write_operators(ops, out / "operators.txt")
    _say(f"generated {series.nt} snapshots on a {cfg.nx}x{cfg.ny} grid (dt {series.dt} days, seed {cfg.seed}) "
         f"-> {out}/series.ssta, velocity.ocvel, operators.txt")
    return 0


def _fit_series(s: Settings, series: AnomalySeries, kind: str) -> OperatorSet:
    lim = LinearInverseModel(kind=kind, lag=s.get("lag", 1, int), dt=series.dt,
                             n_eofs=s.get("n_eofs", 10, int), ridge=s.get("ridge", None, float),
                             theta=s.get("theta", 0.5, float), noise_tol=s.get("noise_tol", 1e-4, float))
    return lim.fit(series.values).operators_


def _kind(model: str) -> str:
    return KIND_OF[model.split("-")[0]]


def cmd_fit(s: Settings) -> int:
    model = s.get("model", "additive-sde")
    if model.endswith("-spde"):
        raise UsageError("fit calibrates sde models; spde models are built from velocities")
    path = s.path("series")
    if path is None:
        raise KeyError("missing config key: series")
    series = read_grid_series(path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ops = _fit_series(s, series, _kind(model))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = s.output()
    out.parent.mkdir(parents=True, exist_ok=True)
    write_operators(ops, out)
    _say(f"fitted {ops.kind} model, reduced size {ops.n}, lag {ops.lag_tau} days -> {out}")
    return 0


def build_spde_operators(cfg: ScenarioConfig, model: str, mult_sigma: float = 0.05, vel=None) -> OperatorSet:
    """Transport plus damping drift with KL noise; ``vel`` overrides the analytic flow."""
    kind = _kind(model)
    if vel is None:
        ops, _ = scenario_operators(cfg)
        A, S = ops.A, ops.S
    else:
        grid = vel.grid
        A = (assemble_transport_operator(grid, vel, cfg.bc) - cfg.gamma * sp.identity(grid.size)).tocsr()
        S = kl_eigenpairs(grid, KernelSpec(cfg.Q, cfg.length_scale), min(cfg.kl_modes, grid.size)).noise_factor()
    n = A.shape[0]
    S1 = mult_sigma * sp.identity(n, format="csr") if kind != "additive" else None
    return OperatorSet(kind, A, S=S if kind != "multiplicative" else None, S1=S1)


def load_model(s: Settings, model: str):
    """Operators, initial state (model coordinates), grid, and the observed series if any."""
    cfg = s.scenario()
    series = read_grid_series(s.path("series")) if "series" in s.values else None
    if model.endswith("-spde"):
        vel = read_velocity(s.path("velocity")) if "velocity" in s.values else None
        if vel is not None:
            cfg = config_from_mapping({**s.values, "nx": str(vel.grid.nx), "ny": str(vel.grid.ny),
                                       "lon_min": repr(vel.grid.lon_min), "lon_max": repr(vel.grid.lon_max),
                                       "lat_min": repr(vel.grid.lat_min), "lat_max": repr(vel.grid.lat_max)})
        ops = build_spde_operators(cfg, model, s.get("mult_sigma", 0.05, float), vel)
        grid = cfg.grid
    else:
        if "operators" in s.values:
            ops = read_operators(s.path("operators"))
        else:
            if series is None:
                series, _, _ = generate_synthetic_scenario(cfg)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ops = _fit_series(s, series, _kind(model))
        grid = series.grid if series is not None else cfg.grid
    if series is not None and series.grid.size != grid.size:
        raise GridMismatchError("series and model grids differ")
    x_grid = series.values[-1] if series is not None else gaussian_bump(grid, cfg.init_amplitude)
    return ops, ops.reduce(x_grid), grid, series


def _method_opts(s: Settings, ops, h, steps):
    opts = dict(n_kl=s.get("N", 3, int), degree=s.get("K", 1 if ops.S1 is None else 2, int),
                noise=s.get("noise", "white"), n_slabs=s.get("n_slabs", None, int), tol=s.get("tol", 1e-8, float),
                max_rank=s.get("max_rank", 200, int))
    return opts


def _galerkin_stride(sim, ops, steps):
    sim.set_params(save_every=1).fit(ops)
    per_save = sim.basis_.size * ops.n * 8
    return max(1, int(np.ceil((steps + 1) * per_save / GALERKIN_MEMORY)))


def _run(s: Settings, ops, x0, method, h, steps, count, seed):
    sim = make_simulator(method, h, steps, count, **_method_opts(s, ops, h, steps))
    if method == "galerkin":
        sim.set_params(save_every=_galerkin_stride(sim, ops, steps))
    sim.fit(ops)
    return sim.simulate(x0, count=count, seed=seed)


def cmd_simulate(s: Settings) -> int:
    model = s.get("model", "additive-spde")
    method = s.get("method", "mean-cov")
    h, steps = s.get("h", 0.5, float), s.get("steps", 400, int)
    count, seed = s.get("paths", 50, int), s.get("seed", 0, int)
    if count < 1 or steps < 1 or not h > 0:
        raise UsageError("need --paths >= 1, --steps >= 1 and --h > 0")
    out = s.output()
    out.mkdir(parents=True, exist_ok=True)
    ops, x0, grid, _ = load_model(s, model)
    res = _run(s, ops, x0, method, h, steps, count, seed)
    mean = ops.lift(res.mean)
    sims = ops.lift(res.realizations)
    dt_out = float(res.times[1] - res.times[0]) if len(res.times) > 1 else h
    write_grid_series(AnomalySeries(grid, res.times, mean), out / "mean.ssta")
    write_grid_series(AnomalySeries(grid, res.times, sims[0]), out / "realization.ssta")

    if "reference" in s.values:
        ref = read_grid_series(s.path("reference"))
        ref_times, ref_values, ref_se = ref.times, ref.values, None
    else:
        # the model's own generating process: a Taylor 1.5 ensemble on an independent stream
        n_ref = s.get("ref_paths", 200, int)
        ens = run_ensemble(ops, x0, h, steps, n_ref, "taylor15", seed=[seed, 1], cov_steps=(), keep_paths=True)
        ref_times, ref_values = ens.times, ops.lift(ens.mean)
        ref_paths = ops.lift(ens.paths)
    mask = _region(s, grid)
    report = score_against_reference(sims, res.times, ref_values, ref_times, mask, h=dt_out)
    report.write_csv(out / "error_report.csv")
    se = report.standard_errors(sims[:, :, mask.indices])
    if "reference" not in s.values:
        idx = np.searchsorted(ref_times, res.times - 1e-9)
        spread = ref_paths[:, idx][:, :, mask.indices].mean(axis=2).std(axis=0, ddof=1)
        se = np.sqrt(se**2 + spread**2 / n_ref)
    np.savetxt(out / "error_se.csv", np.column_stack([res.times, se]), delimiter=",",
               header="time_days,se_degC", comments="", fmt="%.17g")
    final = mean[-1].reshape(grid.shape)
    variance = _grid_variance(ops, res, sims).reshape(grid.shape)
    write_text_matrix(final, out / "mean_final.txt")
    write_pgm16(final, out / "mean_final.pgm")
    write_text_matrix(variance, out / "variance_final.txt")
    write_pgm16(variance, out / "variance_final.pgm")
    within = np.abs(report.err_mean[1:]) <= 3 * se[1:] + 1e-12
    _say(f"simulated {model} with {method}: {steps} steps of {h} days, {count} realizations; "
         f"|err| within 3 s.e. at {within.mean():.1%} of steps -> {out}")
    return 0


def _grid_variance(ops, res, sims):
    if res.factors is not None:
        Zg = ops.lift(res.factors[-1].T).T
        return np.sum(Zg * Zg, axis=1)
    if ops.basis is None:
        return res.variance[-1]
    return np.var(sims[:, -1], axis=0, ddof=1) if len(sims) > 1 else np.zeros(sims.shape[2])


def _region(s: Settings, grid):
    lo, hi = s.get("region_lon", "160,270"), s.get("region_lat", "-5,5")
    try:
        lon = [float(v) for v in lo.split(",")]
        lat = [float(v) for v in hi.split(",")]
        mask = RegionMask(grid, lon[0], lon[1], lat[0], lat[1])
    except (ValueError, IndexError):
        raise ValueError("region_lon/region_lat must be 'lo,hi' pairs") from None
    if mask.indices.size == 0:
        raise EmptyMaskError(f"empty mask: region {lo} x {hi} holds no grid nodes")
    return mask


def cmd_compare(s: Settings) -> int:
    """Final-time covariance of ``--method`` against a Taylor 1.5 ensemble of the same model."""
    model = s.get("model", "additive-spde")
    method = s.get("method", "mean-cov")
    h, steps = s.get("h", 0.5, float), s.get("steps", 400, int)
    count, seed = s.get("paths", 2000, int), s.get("seed", 0, int)
    ops, x0, _, _ = load_model(s, model)
    res = _run(s, ops, x0, method, h, steps, count if method not in ("mean-cov",) else 0, seed)
    C = final_covariance(res) if res.factors is not None or res.realizations is not None else np.diag(res.variance[-1])
    ref = run_ensemble(ops, x0, h, steps, count, "taylor15", seed=[seed, 2]).covariance(-1)
    rel = relative_frobenius(C, ref)
    out = s.output()
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("model,method,reference,paths,rel_frobenius\n")
        fh.write(f"{model},{method},taylor15,{count},{rel!r}\n")
    _say(f"{method} vs taylor15 ({count} paths) final covariance: relative Frobenius difference {rel:.4g}")
    return 0


def cmd_benchmark(s: Settings) -> int:
    model = s.get("model", "additive-spde")
    if not model.endswith("-spde"):
        raise UsageError("benchmark runs spde models on synthetic grids")
    sizes = bench.parse_sizes(s.get("sizes", "8x4,16x8,32x16,64x32"))
    methods = [m.strip() for m in s.get("methods", "mean-cov,galerkin").split(",")]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"method/model incompatibility: unknown method(s) {', '.join(bad)}")
    steps, h = s.get("steps", 100, int), s.get("h", 0.5, float)
    mult_sigma = s.get("mult_sigma", 0.05, float)
    base = s.scenario()
    opts = dict(n_kl=s.get("N", 3, int), degree=s.get("K", 1 if model.startswith("additive") else 2, int),
                noise=s.get("noise", "white"), n_slabs=s.get("n_slabs", None, int))
    records = bench.run_benchmark(sizes, methods, model, base,
                                  lambda cfg, m: build_spde_operators(cfg, m, mult_sigma),
                                  reps=s.get("reps", 3, int), steps=steps, h=h, n_paths=s.get("paths", 50, int),
                                  method_opts=opts, log=_say)
    out = s.output()
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.write_records(records, out)
    if {"mean-cov", "galerkin"} <= set(methods) and len(sizes) > 1:
        summary = bench.find_crossover(records).describe()
        Path(str(out) + ".crossover.txt").write_text(summary + "\n")
        _say(summary)
    _say(f"{len(records)} benchmark records -> {out}")
    return 0


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "simulate": cmd_simulate, "compare": cmd_compare,
            "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = Settings(args)
        if args.model is None and "model" in settings.values and settings.values["model"] not in MODELS:
            raise UsageError(f"unknown model {settings.values['model']!r}; expected one of {', '.join(MODELS)}")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"nino: usage error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"nino: numerical failure: {exc}", file=sys.stderr)
        return 3
    except DATA_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"nino: data error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
