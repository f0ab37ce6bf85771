"""Gridded series and velocity files, operator dumps, and the synthetic twin scenario.

SSTA-GRID v1 (anomaly series)::

    ssta-grid 1
    nx ny
    lon_min lon_max lat_min lat_max
    nt dt_days t0_days
    <nt blocks of ny lines with nx values, latitude rows south to north>

OCVEL v1 (velocities, deg/day) has the same header with first line
``ocvel 1`` and two blocks per time slice, ``u`` then ``v``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .galerkin import KernelSpec, kl_eigenpairs
from .grid import Grid, VelocityField, assemble_transport_operator, velocity_from_mps
from .operators import OperatorSet
from .paths import STEPPERS, NoiseIncrements

SERIES_MAGIC = "ssta-grid"
VELOCITY_MAGIC = "ocvel"
OPERATOR_MAGIC = "nino-operators"
FACTOR_MAGIC = "nino-factors"


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


class UnstableDriftError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalySeries:
    """Snapshots ``values[k]`` (flat, node order ``j*nx + i``) at uniformly spaced ``times``."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape != (times.size, self.grid.size):
            raise ValueError(f"values must have shape ({times.size}, {self.grid.size}), got {values.shape}")
        if times.size == 0:
            raise ValueError("series needs at least one snapshot")
        if times.size > 1:
            d = np.diff(times)
            if np.any(d <= 0):
                raise ValueError("times must be strictly increasing")
            if np.ptp(d) > 1e-9 * abs(d.mean()):
                raise ValueError("times must be uniformly spaced")
        if not np.all(np.isfinite(values)):
            raise ValueError("series contains non-finite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 1.0

    @property
    def nt(self) -> int:
        return self.times.size


def _fmt(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def _write_header(fh, magic, grid, nt, dt, t0):
    fh.write(f"{magic} 1\n{grid.nx} {grid.ny}\n")
    fh.write(_fmt([grid.lon_min, grid.lon_max, grid.lat_min, grid.lat_max]) + "\n")
    fh.write(f"{nt} {float(dt)!r} {float(t0)!r}\n")


def write_grid_series(series: AnomalySeries, path) -> None:
    g = series.grid
    with open(path, "w") as fh:
        _write_header(fh, SERIES_MAGIC, g, series.nt, series.dt, series.times[0])
        for snap in series.values:
            for row in snap.reshape(g.ny, g.nx):
                fh.write(_fmt(row) + "\n")


class _Lines:
    def __init__(self, path):
        self.path = str(path)
        try:
            text = Path(path).read_text()
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: not a text file") from None
        self.lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
        self.pos = 0

    def error(self, lineno, msg):
        return FormatError(f"{self.path}:{lineno}: {msg}")

    def next(self, what):
        if self.pos >= len(self.lines):
            last = self.lines[-1][0] if self.lines else 0
            raise self.error(last + 1, f"unexpected end of file, expected {what}")
        item = self.lines[self.pos]
        self.pos += 1
        return item

    def numbers(self, what, count, kind=float):
        lineno, text = self.next(what)
        toks = text.split()
        if len(toks) != count:
            raise self.error(lineno, f"count mismatch in {what}: expected {count} values, found {len(toks)}")
        try:
            vals = [kind(t) for t in toks]
        except ValueError:
            raise self.error(lineno, f"{what}: cannot parse {text.strip()!r}") from None
        if kind is float and not all(np.isfinite(vals)):
            raise self.error(lineno, f"{what}: non-finite value")
        return vals

    def block(self, rows, cols, what):
        remaining = len(self.lines) - self.pos
        if remaining < rows:
            lineno = self.lines[-1][0] + 1 if self.lines else 1
            raise self.error(lineno, f"{what}: expected {rows} value rows, found {remaining}")
        return np.array([self.numbers(f"{what} row {r + 1}", cols) for r in range(rows)])


def _read_header(rd: _Lines, magic: str):
    lineno, text = rd.next("header")
    toks = text.split()
    if len(toks) != 2 or toks[0] != magic:
        raise rd.error(lineno, f"malformed header: expected '{magic} 1', found {text.strip()!r}")
    if toks[1] != "1":
        raise rd.error(lineno, f"unsupported version {toks[1]!r} (this reader handles version 1)")
    nx, ny = rd.numbers("grid size 'nx ny'", 2, int)
    bounds = rd.numbers("bounds 'lon_min lon_max lat_min lat_max'", 4)
    lineno, text = rd.next("time line 'nt dt_days t0_days'")
    toks = text.split()
    try:
        nt, dt, t0 = int(toks[0]), float(toks[1]), float(toks[2])
        if len(toks) != 3:
            raise ValueError
    except (ValueError, IndexError):
        raise rd.error(lineno, f"malformed time line {text.strip()!r}") from None
    if nt < 1 or not dt > 0:
        raise rd.error(lineno, "need nt >= 1 and dt_days > 0")
    try:
        grid = Grid(nx, ny, *bounds)
    except ValueError as exc:
        raise rd.error(lineno - 2, str(exc)) from None
    return grid, nt, dt, t0


def _check_end(rd: _Lines):
    if rd.pos < len(rd.lines):
        lineno = rd.lines[rd.pos][0]
        raise rd.error(lineno, f"count mismatch: {len(rd.lines) - rd.pos} unexpected extra rows")


def read_grid_series(path) -> AnomalySeries:
    rd = _Lines(path)
    grid, nt, dt, t0 = _read_header(rd, SERIES_MAGIC)
    need = nt * grid.ny
    have = len(rd.lines) - rd.pos
    if have < need:
        raise rd.error(rd.lines[-1][0] + 1, f"truncated: expected {need} value rows, found {have}")
    values = np.empty((nt, grid.size))
    for k in range(nt):
        values[k] = rd.block(grid.ny, grid.nx, f"snapshot {k + 1}").reshape(-1)
    _check_end(rd)
    return AnomalySeries(grid, t0 + dt * np.arange(nt), values)


def write_velocity(vel: VelocityField, path) -> None:
    g = vel.grid
    with open(path, "w") as fh:
        _write_header(fh, VELOCITY_MAGIC, g, 1, 1.0, 0.0)
        for comp in (vel.u_east, vel.v_north):
            for row in np.asarray(comp).reshape(g.ny, g.nx):
                fh.write(_fmt(row) + "\n")


def read_velocity(path) -> VelocityField:
    """Read an OCVEL file; for several time slices the time mean is returned."""
    rd = _Lines(path)
    grid, nt, _, _ = _read_header(rd, VELOCITY_MAGIC)
    need = 2 * nt * grid.ny
    have = len(rd.lines) - rd.pos
    if have < need:
        raise rd.error(rd.lines[-1][0] + 1, f"truncated: expected {need} value rows, found {have}")
    u = np.zeros(grid.size)
    v = np.zeros(grid.size)
    for k in range(nt):
        u += rd.block(grid.ny, grid.nx, f"u slice {k + 1}").reshape(-1)
        v += rd.block(grid.ny, grid.nx, f"v slice {k + 1}").reshape(-1)
    _check_end(rd)
    return VelocityField(grid, u / nt, v / nt)


def _write_block(fh, name, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    fh.write(f"block {name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        fh.write(_fmt(row) + "\n")


def write_operators(ops: OperatorSet, path) -> None:
    """Versioned text dump of an operator set, dense blocks in row-major order."""
    with open(path, "w") as fh:
        fh.write(f"{OPERATOR_MAGIC} 1\nkind {ops.kind}\nn {ops.n}\nlag_tau {float(ops.lag_tau)!r}\n")
        _write_block(fh, "A", ops.dense_A)
        for name in ("S", "S1", "basis"):
            M = getattr(ops, name)
            if M is not None:
                _write_block(fh, name, M.toarray() if sp.issparse(M) else M)
        fh.write("end\n")


def read_operators(path) -> OperatorSet:
    rd = _Lines(path)
    lineno, text = rd.next("header")
    toks = text.split()
    if len(toks) != 2 or toks[0] != OPERATOR_MAGIC:
        raise rd.error(lineno, f"malformed header: expected '{OPERATOR_MAGIC} 1'")
    if toks[1] != "1":
        raise rd.error(lineno, f"unsupported version {toks[1]!r}")
    meta = {}
    for key in ("kind", "n", "lag_tau"):
        lineno, text = rd.next(key)
        toks = text.split()
        if len(toks) != 2 or toks[0] != key:
            raise rd.error(lineno, f"expected '{key} <value>'")
        meta[key] = toks[1]
    blocks = {}
    while True:
        lineno, text = rd.next("block or 'end'")
        toks = text.split()
        if toks == ["end"]:
            break
        if len(toks) != 4 or toks[0] != "block":
            raise rd.error(lineno, f"expected 'block NAME rows cols', found {text.strip()!r}")
        try:
            rows, cols = int(toks[2]), int(toks[3])
        except ValueError:
            raise rd.error(lineno, "block dimensions must be integers") from None
        blocks[toks[1]] = rd.block(rows, cols, f"block {toks[1]}") if rows else np.zeros((0, cols))
    _check_end(rd)
    if "A" not in blocks:
        raise rd.error(lineno, "operator dump has no A block")
    try:
        return OperatorSet(meta["kind"], blocks["A"], S=blocks.get("S"), S1=blocks.get("S1"),
                           lag_tau=float(meta["lag_tau"]), basis=blocks.get("basis"))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_factor_checkpoint(times, mean, factors, path) -> None:
    """Mean and low-rank covariance factors at a sequence of times."""
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"{FACTOR_MAGIC} 1\nsteps {len(times)} {mean.shape[1]}\n")
        for t, m, Z in zip(times, mean, factors):
            fh.write(f"time {float(t)!r}\n")
            _write_block(fh, "mean", m.reshape(1, -1))
            Z = np.asarray(Z, dtype=float)
            fh.write(f"block Z {Z.shape[0]} {Z.shape[1]}\n")
            for row in Z:
                fh.write(_fmt(row) + "\n")


def read_factor_checkpoint(path):
    """Returns ``(times, mean, factors)``."""
    rd = _Lines(path)
    lineno, text = rd.next("header")
    if text.split() != [FACTOR_MAGIC, "1"]:
        raise rd.error(lineno, f"malformed header: expected '{FACTOR_MAGIC} 1'")
    lineno, text = rd.next("steps line")
    toks = text.split()
    if len(toks) != 3 or toks[0] != "steps":
        raise rd.error(lineno, "expected 'steps COUNT n'")
    count, n = int(toks[1]), int(toks[2])
    times, means, factors = [], [], []
    for _ in range(count):
        lineno, text = rd.next("time line")
        toks = text.split()
        if len(toks) != 2 or toks[0] != "time":
            raise rd.error(lineno, "expected 'time T'")
        times.append(float(toks[1]))
        lineno, text = rd.next("mean block")
        if text.split() != ["block", "mean", "1", str(n)]:
            raise rd.error(lineno, f"expected 'block mean 1 {n}'")
        means.append(rd.block(1, n, "mean")[0])
        lineno, text = rd.next("factor block")
        toks = text.split()
        if len(toks) != 4 or toks[:2] != ["block", "Z"] or toks[2] != str(n):
            raise rd.error(lineno, f"expected 'block Z {n} RANK'")
        r = int(toks[3])
        factors.append(rd.block(n, r, "factor") if r else np.zeros((n, 0)))
    _check_end(rd)
    return np.array(times), np.array(means).reshape(count, n), factors


@dataclass
class ScenarioConfig:
    """Synthetic twin: double-gyre transport, damping, KL-shaped additive noise.

    Velocities ``U`` in m/s, times in days, coordinates in degrees.
    """

    nx: int = 32
    ny: int = 16
    lon_min: float = 150.0
    lon_max: float = 270.0
    lat_min: float = -15.0
    lat_max: float = 15.0
    velocity: str = "double-gyre"
    U: float = 0.5
    gamma: float = 0.1
    Q: float = 0.05
    length_scale: float = 10.0
    kl_modes: int = 8
    bc: str = "zero-inflow"
    dt: float = 0.5
    n_steps: int = 4000
    sample_every: int = 2
    burn_in: int = 0
    init_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("step dt must be positive")
        if self.gamma < 0 or self.Q < 0:
            raise ValueError("gamma and Q must be >= 0")
        if self.velocity not in ("double-gyre", "zero"):
            raise ValueError(f"unknown velocity field {self.velocity!r}; expected 'double-gyre' or 'zero'")
        if self.n_steps < 1 or self.sample_every < 1 or self.burn_in < 0:
            raise ValueError("need n_steps >= 1, sample_every >= 1, burn_in >= 0")

    @property
    def grid(self) -> Grid:
        return Grid(self.nx, self.ny, self.lon_min, self.lon_max, self.lat_min, self.lat_max)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def double_gyre(grid: Grid, U: float) -> VelocityField:
    """``u = U sin(pi xi) cos(pi zeta)``, ``v = -U cos(pi xi) sin(pi zeta)`` on unit-square coordinates."""
    X, Y = grid.coordinates().T
    xi = (X - grid.lon_min) / max(grid.lon_max - grid.lon_min, 1e-300)
    zeta = (Y - grid.lat_min) / max(grid.lat_max - grid.lat_min, 1e-300)
    u = U * np.sin(np.pi * xi) * np.cos(np.pi * zeta)
    v = -U * np.cos(np.pi * xi) * np.sin(np.pi * zeta)
    return velocity_from_mps(grid, u, v)


def gaussian_bump(grid: Grid, amplitude: float = 1.0) -> np.ndarray:
    X, Y = grid.coordinates().T
    cx, cy = 0.5 * (grid.lon_min + grid.lon_max), 0.5 * (grid.lat_min + grid.lat_max)
    sx = max(0.15 * (grid.lon_max - grid.lon_min), 1e-12)
    sy = max(0.25 * (grid.lat_max - grid.lat_min), 1e-12)
    return amplitude * np.exp(-0.5 * (((X - cx) / sx) ** 2 + ((Y - cy) / sy) ** 2))


def scenario_operators(cfg: ScenarioConfig):
    """True drift ``A = T - gamma I`` and KL noise factor; returns ``(OperatorSet, VelocityField)``."""
    grid = cfg.grid
    vel = double_gyre(grid, cfg.U) if cfg.velocity == "double-gyre" else VelocityField.zeros(grid)
    A = assemble_transport_operator(grid, vel, cfg.bc) - cfg.gamma * sp.identity(grid.size, format="csr")
    A = A.tocsr()
    lead = _leading_real_part(A)
    if lead >= 0:
        raise UnstableDriftError(
            f"drift is unstable (max real eigenvalue {lead:.4g} >= 0); increase the damping gamma"
        )
    kl = kl_eigenpairs(grid, KernelSpec(cfg.Q, cfg.length_scale), min(cfg.kl_modes, grid.size))
    return OperatorSet("additive", A, S=kl.noise_factor()), vel


def _leading_real_part(A) -> float:
    # Gershgorin bound first; the exact spectrum only when it is inconclusive
    M = sp.csr_matrix(A)
    d = M.diagonal()
    radius = np.asarray(abs(M).sum(axis=1)).ravel() - np.abs(d)
    bound = float((d + radius).max())
    if bound < 0:
        return bound
    return float(np.linalg.eigvals(M.toarray()).real.max())


def generate_synthetic_scenario(cfg: ScenarioConfig):
    """Simulate the additive twin with Taylor 1.5; returns ``(AnomalySeries, VelocityField, OperatorSet)``.

    The series keeps every ``sample_every``-th step after ``burn_in`` steps.
    """
    ops, vel = scenario_operators(cfg)
    x = gaussian_bump(cfg.grid, cfg.init_amplitude)
    step = STEPPERS["taylor15"]
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    q = ops.S.shape[1]
    total = cfg.burn_in + cfg.n_steps
    keep = []
    for k in range(total + 1):
        if k:
            x = step(ops, x, cfg.dt, NoiseIncrements.draw(rng, 1, q, False, cfg.dt))[0]
        if k >= cfg.burn_in and (k - cfg.burn_in) % cfg.sample_every == 0:
            keep.append(x)
    values = np.array(keep)
    times = cfg.dt * (cfg.burn_in + cfg.sample_every * np.arange(len(keep)))
    return AnomalySeries(cfg.grid, times, values), vel, ops


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Values stay strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', found {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def config_from_mapping(values: dict, required=()) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from string values; unknown keys are ignored."""
    missing = [k for k in required if k not in values]
    if missing:
        raise KeyError(f"missing config key: {', '.join(missing)}")
    kwargs = {}
    for f in fields(ScenarioConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        typ = type(f.default)
        try:
            kwargs[f.name] = _int_strict(raw) if typ is int else typ(raw)
        except ValueError:
            raise ValueError(f"config key {f.name}: cannot parse {raw!r} as {typ.__name__}") from None
    return ScenarioConfig(**kwargs)


def _int_strict(raw: str) -> int:
    v = float(raw)
    if v != int(v):
        raise ValueError(raw)
    return int(v)
