"""Rectangular lon-lat grids, gridded fields and the discrete transport operator.

Node ordering is latitude-major: the value at longitude index ``i`` and
latitude index ``j`` (south to north) lives at flat index ``j * nx + i``.
This matches the row order of the SSTA-GRID text format.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

EARTH_RADIUS_M = 6.371e6
SECONDS_PER_DAY = 86400.0

BOUNDARY_RULES = ("zero-inflow", "periodic-lon")


class GridMismatchError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class SingularSystemError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if self.nx > 1 and not self.lon_max > self.lon_min:
            raise ValueError("lon_max must exceed lon_min")
        if self.ny > 1 and not self.lat_max > self.lat_min:
            raise ValueError("lat_max must exceed lat_min")

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def dx(self) -> float:
        return (self.lon_max - self.lon_min) / (self.nx - 1) if self.nx > 1 else 1.0

    @property
    def dy(self) -> float:
        return (self.lat_max - self.lat_min) / (self.ny - 1) if self.ny > 1 else 1.0

    @property
    def lon(self) -> np.ndarray:
        return np.linspace(self.lon_min, self.lon_max, self.nx)

    @property
    def lat(self) -> np.ndarray:
        return np.linspace(self.lat_min, self.lat_max, self.ny)

    def coordinates(self) -> np.ndarray:
        """(size, 2) array of (lon, lat) node coordinates in flat order."""
        lon, lat = np.meshgrid(self.lon, self.lat)
        return np.column_stack([lon.ravel(), lat.ravel()])

    def index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def cell_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights per node (degrees squared)."""
        return np.outer(_trapezoid(self.ny, self.dy), _trapezoid(self.nx, self.dx)).ravel()


def _trapezoid(n, d):
    if n == 1:
        return np.ones(1)
    w = np.full(n, d)
    w[[0, -1]] = d / 2
    return w


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.size:
            raise GridMismatchError(f"field has {values.size} values, grid has {self.grid.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass(frozen=True)
class VelocityField:
    """Currents in degrees per day (see :func:`velocity_from_mps`)."""

    grid: Grid
    u_east: np.ndarray
    v_north: np.ndarray

    def __post_init__(self):
        for name in ("u_east", "v_north"):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if arr.size != self.grid.size:
                raise GridMismatchError(f"{name} has {arr.size} values, grid has {self.grid.size}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, grid: Grid) -> "VelocityField":
        return cls(grid, np.zeros(grid.size), np.zeros(grid.size))


def velocity_from_mps(grid: Grid, u_mps, v_mps) -> VelocityField:
    """Convert currents in m/s to degrees/day on a sphere of radius 6371 km.

    The zonal component is divided by cos(latitude).
    """
    lat = np.repeat(grid.lat, grid.nx)
    deg_per_m = 180.0 / (np.pi * EARTH_RADIUS_M)
    coslat = np.cos(np.deg2rad(lat))
    if np.any(coslat <= 1e-12):
        raise ValueError("zonal conversion undefined at the poles")
    u = np.asarray(u_mps, dtype=float).ravel() * SECONDS_PER_DAY * deg_per_m / coslat
    v = np.asarray(v_mps, dtype=float).ravel() * SECONDS_PER_DAY * deg_per_m
    return VelocityField(grid, u, v)


@dataclass(frozen=True)
class RegionMask:
    grid: Grid
    lon_lo: float
    lon_hi: float
    lat_lo: float
    lat_hi: float
    indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = self.grid.coordinates()
        inside = (
            (coords[:, 0] >= self.lon_lo)
            & (coords[:, 0] <= self.lon_hi)
            & (coords[:, 1] >= self.lat_lo)
            & (coords[:, 1] <= self.lat_hi)
        )
        idx = np.flatnonzero(inside)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def whole(cls, grid: Grid) -> "RegionMask":
        return cls(grid, grid.lon_min, grid.lon_max, grid.lat_min, grid.lat_max)


def restrict_to_region(values, mask: RegionMask) -> np.ndarray:
    """Values at the masked nodes, in ascending flat-index order.

    Accepts a :class:`Field` or any array whose last axis runs over grid nodes.
    """
    if isinstance(values, Field):
        if values.grid != mask.grid:
            raise GridMismatchError("field and mask live on different grids")
        values = values.values
    values = np.asarray(values)
    if values.shape[-1] != mask.grid.size:
        raise GridMismatchError(f"last axis {values.shape[-1]} != grid size {mask.grid.size}")
    if mask.indices.size == 0:
        raise EmptyMaskError("empty mask: region does not intersect the grid")
    return values[..., mask.indices]


def assemble_transport_operator(grid: Grid, vel: VelocityField, bc: str = "zero-inflow") -> sp.csr_matrix:
    """First-order upwind discretisation of the transport term.

    Returns the sparse matrix ``T`` with ``(T x)_p ~ -(u . grad x)(p)``, so
    that ``dx/dt = T x`` carries anomalies along the currents. The stencil
    picks the upstream neighbour per node from the velocity sign.

    ``bc="zero-inflow"`` sets the anomaly entering from outside to zero.
    ``bc="periodic-lon"`` wraps the longitude direction and uses zero-gradient
    extrapolation at the latitude edges, so constants are conserved.
    """
    if vel.grid != grid:
        raise GridMismatchError("velocity field is defined on a different grid")
    if bc not in BOUNDARY_RULES:
        raise ValueError(f"unknown boundary rule {bc!r}; expected one of {BOUNDARY_RULES}")
    nx, ny = grid.nx, grid.ny
    u = vel.u_east.reshape(ny, nx)
    v = vel.v_north.reshape(ny, nx)
    jj, ii = np.mgrid[0:ny, 0:nx]
    rows, cols, vals = [], [], []

    def add(coef, di, dj, axis_len, periodic):
        # coef >= 0 is |velocity| / spacing; upstream offset (di, dj)
        active = coef > 0
        ti, tj = ii + di, jj + dj
        pos = ti if dj == 0 else tj
        inside = (pos >= 0) & (pos < axis_len)
        if periodic:
            ti = ti % nx
            inside = np.ones_like(inside)
        center = (jj * nx + ii)
        keep = active & inside
        rows.append(center[keep])
        cols.append((tj * nx + ti)[keep])
        vals.append(coef[keep])
        # diagonal: outflow always; inflow-boundary nodes keep -coef only for zero-inflow
        diag = active if bc == "zero-inflow" else keep
        rows.append(center[diag])
        cols.append(center[diag])
        vals.append(-coef[diag])

    periodic = bc == "periodic-lon"
    if nx > 1:
        ax = np.abs(u) / grid.dx
        add(np.where(u > 0, ax, 0.0), -1, 0, nx, periodic)
        add(np.where(u < 0, ax, 0.0), +1, 0, nx, periodic)
    if ny > 1:
        ay = np.abs(v) / grid.dy
        add(np.where(v > 0, ay, 0.0), 0, -1, ny, False)
        add(np.where(v < 0, ay, 0.0), 0, +1, ny, False)
    n = grid.size
    if rows:
        r, c, x = (np.concatenate(a) for a in (rows, cols, vals))
    else:
        r = c = np.zeros(0, dtype=int)
        x = np.zeros(0)
    # coo -> csr sums duplicate (row, col) pairs
    return sp.coo_matrix((x, (r, c)), shape=(n, n)).tocsr()


def cfl_step_bound(A) -> float:
    """Largest ``h`` for which the Crank-Nicolson step of an upwind operator
    is non-expansive in the max norm: ``h <= 2 / max_i |A_ii|``."""
    d = np.abs(A.diagonal()) if sp.issparse(A) else np.abs(np.diag(A))
    dmax = d.max(initial=0.0)
    return np.inf if dmax == 0 else 2.0 / dmax


class CrankNicolson:
    """Reusable Crank-Nicolson stepper for ``dx/dt = A x + f(t)``.

    Factorises ``I - h/2 A`` once. Works for sparse or dense ``A`` and
    for vector or multi-column right-hand sides.
    """

    def __init__(self, A, h: float):
        if h == 0 or not np.isfinite(h):
            raise ValueError("step h must be finite and nonzero")
        self.h = h
        n = A.shape[0]
        if sp.issparse(A):
            A = sp.csc_matrix(A)
            eye = sp.identity(n, format="csc")
            self.A = A
            self._explicit = (eye + 0.5 * h * A).tocsr()
            lhs = (eye - 0.5 * h * A).tocsc()
            try:
                self._lu = spla.splu(lhs)
            except RuntimeError as exc:
                raise SingularSystemError(f"I - (h/2)A is singular: {exc}") from None
            self._solve = self._lu.solve
            diag = np.abs(self._lu.U.diagonal())
        else:
            A = np.asarray(A, dtype=float)
            eye = np.eye(n)
            self.A = A
            self._explicit = eye + 0.5 * h * A
            with warnings.catch_warnings():
                # singularity is reported below from the pivots
                warnings.simplefilter("ignore", la.LinAlgWarning)
                lu = la.lu_factor(eye - 0.5 * h * A, check_finite=False)
            self._solve = lambda b: la.lu_solve(lu, b, check_finite=False)
            diag = np.abs(np.diag(lu[0]))
        if n and (diag.min() == 0 or diag.max() / diag.min() > 1e14):
            cond = np.inf if diag.min() == 0 else diag.max() / diag.min()
            raise SingularSystemError(f"I - (h/2)A is singular or ill-conditioned (pivot ratio {cond:.3g})")

    def step(self, x, forcing=None):
        rhs = self._explicit @ x
        if forcing is not None:
            rhs = rhs + self.h * forcing
        return self._solve(np.asarray(rhs))


def crank_nicolson_step(A, x, h: float):
    """One Crank-Nicolson step ``(I - h/2 A) x' = (I + h/2 A) x``."""
    return CrankNicolson(A, h).step(np.asarray(x, dtype=float))
