"""Realizations from mean/covariance-factor trajectories and scoring against reference data.

Each realization draws a fresh standard normal ``z`` at every step, so the
samples have the right marginal law at each time but no temporal
correlation.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import EmptyMaskError, RegionMask


class TimeAlignmentError(ValueError):
    pass


@dataclass
class RealizationRequest:
    mean: np.ndarray  # (n_times, n)
    factors: list  # one (n, r_t) factor per time
    seed: int | None = 0
    count: int = 1

    def __post_init__(self):
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if len(self.factors) != len(self.mean):
            raise ValueError(f"{len(self.factors)} factors for {len(self.mean)} mean steps")
        n = self.mean.shape[1]
        for k, Z in enumerate(self.factors):
            if np.shape(Z)[0] != n:
                raise ValueError(f"dimension mismatch: factor {k} has {np.shape(Z)[0]} rows, mean has {n}")


def sample_realizations(req: RealizationRequest, zero_noise: bool = False) -> np.ndarray:
    """``X = m + Z z`` per step; returns shape ``(count, n_times, n)``.

    ``zero_noise`` forces ``z = 0`` and exists for testing.
    """
    rng = np.random.default_rng(req.seed)
    out = np.repeat(req.mean[None], req.count, axis=0)
    if zero_noise:
        return out
    for k, Z in enumerate(req.factors):
        Z = np.asarray(Z, dtype=float)
        if Z.shape[1] == 0:
            continue
        z = rng.standard_normal((req.count, Z.shape[1]))
        out[:, k] += z @ Z.T
    return out


@dataclass
class ErrorReport:
    """Per-step regional error of an ensemble against reference data.

    ``err_mean`` is the spatial mean over the region of
    ``err(t) = mean_k (X(t) - X_k(t))``, reference minus simulation;
    ``rel_l2`` is ``||err(t)|| / ||X(t)||`` over the region.
    """

    times: np.ndarray
    err_mean: np.ndarray
    rel_l2: np.ndarray
    err_field: np.ndarray  # (n_times, n_region)
    mask: RegionMask
    n: int

    def standard_errors(self, sims_region: np.ndarray) -> np.ndarray:
        """Monte Carlo standard error of ``err_mean`` from the spread of the realizations."""
        per_sim = sims_region.mean(axis=2)  # (count, n_times)
        if self.n < 2:
            return np.full(len(self.times), np.inf)
        return per_sim.std(axis=0, ddof=1) / np.sqrt(self.n)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_days", "err_mean_degC", "rel_l2"])
            for t, e, r in zip(self.times, self.err_mean, self.rel_l2):
                w.writerow([repr(float(t)), repr(float(e)), repr(float(r))])


def read_error_csv(path):
    """Read back ``(times, err_mean, rel_l2)`` from :meth:`ErrorReport.write_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["time_days", "err_mean_degC", "rel_l2"]:
        raise ValueError(f"{path}: not an error report CSV")
    data = np.array(rows[1:], dtype=float).reshape(-1, 3)
    return data[:, 0], data[:, 1], data[:, 2]


def align_times(sim_times, ref_times, h: float | None = None) -> np.ndarray:
    """Nearest reference index for every simulation time; offsets above ``h/2`` are errors."""
    sim_times = np.asarray(sim_times, dtype=float)
    ref_times = np.asarray(ref_times, dtype=float)
    if h is None:
        h = float(np.median(np.diff(sim_times))) if sim_times.size > 1 else np.inf
    pos = np.clip(np.searchsorted(ref_times, sim_times), 1, max(len(ref_times) - 1, 1))
    left = ref_times[pos - 1]
    right = ref_times[np.minimum(pos, len(ref_times) - 1)]
    idx = np.where(np.abs(sim_times - left) <= np.abs(right - sim_times), pos - 1, pos)
    idx = np.minimum(idx, len(ref_times) - 1)
    gap = np.abs(ref_times[idx] - sim_times)
    bad = gap > h / 2 + 1e-9 * max(1.0, abs(h))
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise TimeAlignmentError(
            f"time misalignment: simulation time {sim_times[k]} is {gap[k]:.6g} days from the nearest "
            f"reference time (limit h/2 = {h / 2:.6g})"
        )
    return idx


def score_against_reference(sims, sim_times, reference, ref_times, mask: RegionMask,
                            h: float | None = None) -> ErrorReport:
    """Score realizations ``sims`` (count, n_times, n_grid) against a reference series (nt_ref, n_grid)."""
    sims = np.asarray(sims, dtype=float)
    if sims.ndim == 2:
        sims = sims[None]
    reference = np.asarray(reference, dtype=float)
    if mask.indices.size == 0:
        raise EmptyMaskError("empty mask: the region contains no grid nodes")
    if sims.shape[2] != reference.shape[1] or sims.shape[2] != mask.grid.size:
        raise ValueError("simulations, reference and mask must share the grid")
    idx = align_times(sim_times, ref_times, h)
    ref = reference[idx][:, mask.indices]
    sim = sims[:, :, mask.indices]
    err = (ref[None] - sim).mean(axis=0)
    ref_norm = np.linalg.norm(ref, axis=1)
    err_norm = np.linalg.norm(err, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(ref_norm > 0, err_norm / ref_norm, np.where(err_norm == 0, 0.0, np.inf))
    return ErrorReport(np.asarray(sim_times, dtype=float), err.mean(axis=1), rel, err, mask, sims.shape[0])


def write_text_matrix(matrix, path) -> None:
    """Plain-text heatmap: one row per latitude, south to north."""
    np.savetxt(path, np.asarray(matrix, dtype=float), fmt="%.17g")


def write_pgm16(matrix, path) -> tuple[float, float]:
    """Binary 16-bit PGM heatmap; returns the ``(vmin, vmax)`` of the linear scaling.

    The header comment records ``vmin``, ``vmax`` and the mapping
    ``value = vmin + (vmax - vmin) * pixel / 65535``.
    Image rows run north to south, so the first row is the northernmost latitude.
    """
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise ValueError("heatmap needs a finite 2-D matrix")
    vmin, vmax = float(M.min()), float(M.max())
    span = vmax - vmin
    pix = np.zeros(M.shape) if span == 0 else (M - vmin) / span * 65535.0
    pix = np.rint(pix[::-1]).astype(">u2")
    header = (
        f"P5\n# vmin={vmin!r} vmax={vmax!r} value = vmin + (vmax - vmin) * pixel / 65535\n"
        f"{M.shape[1]} {M.shape[0]}\n65535\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pix.tobytes())
    return vmin, vmax


def read_pgm16(path) -> np.ndarray:
    """Decode a heatmap written by :func:`write_pgm16` back to values (south to north rows)."""
    data = Path(path).read_bytes()
    lines, pos, vmin, vmax = [], 0, None, None
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            scale = dict(re.findall(r"(vmin|vmax)=(\S+)", line))
            vmin, vmax = float(scale.get("vmin", vmin or 0.0)), float(scale.get("vmax", vmax or 65535.0))
            continue
        lines.append(line)
    if lines[0] != "P5":
        raise ValueError("not a binary PGM")
    w, hgt = map(int, lines[1].split())
    pix = np.frombuffer(data[pos:pos + 2 * w * hgt], dtype=">u2").reshape(hgt, w).astype(float)
    vmin = 0.0 if vmin is None else vmin
    vmax = 65535.0 if vmax is None else vmax
    return (vmin + (vmax - vmin) * pix / 65535.0)[::-1]
