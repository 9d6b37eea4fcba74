"""Particle realization of the flow: Euler-Maruyama for

    dX = grad r(X) dt + sqrt(2 beta) dB

on ``[lo, hi]`` with reflecting walls.  The drift points uphill in reward so
that ``exp(r / beta)`` is the invariant density, matching the Fokker-Planck
module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .measures import ActionGrid, DiscreteMeasure, RewardField


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Particle positions plus the generator that drives them.

    The generator is advanced by every step, so an ensemble should be stepped
    once; keep the seed to reproduce a run.
    """

    positions: np.ndarray = field(repr=False)
    grid: ActionGrid
    rng: np.random.Generator = field(repr=False)
    boundary: str = "reflecting"

    @property
    def N(self) -> int:
        return len(self.positions)


def reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold positions back into ``[lo, hi]`` (handles multiple bounces)."""
    out = np.array(x, dtype=float)
    bad = (out < lo) | (out > hi)
    if np.any(bad):
        L = hi - lo
        y = np.mod(out[bad] - lo, 2 * L)
        out[bad] = lo + np.where(y > L, 2 * L - y, y)
    return out


def init_particles(pi0: DiscreteMeasure, N: int, seed: int) -> ParticleEnsemble:
    """Draw ``N`` i.i.d. actions from the piecewise-constant density of ``pi0``."""
    if int(N) != N or N < 1:
        raise ParameterError(f"need N >= 1 particles, got {N}")
    N = int(N)
    rng = np.random.default_rng(seed)
    grid = pi0.grid
    cdf = np.cumsum(pi0.w)
    u = rng.random(N) * cdf[-1]
    cells = np.minimum(np.searchsorted(cdf, u, side="right"), grid.n - 1)
    # round-off at the top of the cdf can land on trailing empty cells
    nonzero = np.flatnonzero(pi0.w > 0)
    cells = np.minimum(cells, nonzero[-1])
    x = grid.lo + (cells + rng.random(N)) * grid.h
    return ParticleEnsemble(x, grid, rng)


def default_dt(r: RewardField, beta: float) -> float:
    """``min(0.4 h^2 / beta, 0.01 / max|grad r|)``."""
    h = r.grid.h
    slope = float(np.max(np.abs(r.gradient)))
    cands = [0.4 * h * h / beta if beta > 0 else math.inf]
    if slope > 0:
        cands.append(0.01 / slope)
    dt = min(cands)
    if not math.isfinite(dt):
        raise ParameterError("cannot pick a default dt for beta = 0 and a flat reward")
    return dt


def drift(x: np.ndarray, r: RewardField) -> np.ndarray:
    """Grid gradient of the reward, linearly interpolated (constant past the end centres)."""
    grid = r.grid
    gr = r.gradient
    t = np.asarray(x, dtype=float) - grid.centers[0]
    t *= 1.0 / grid.h
    np.clip(t, 0.0, grid.n - 1.0, out=t)
    i = t.astype(np.int64)
    np.minimum(i, grid.n - 2, out=i)
    t -= i
    return gr[i] + t * np.diff(gr)[i]


def langevin_step(e: ParticleEnsemble, r: RewardField, beta: float, dt: float) -> ParticleEnsemble:
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    if beta < 0:
        raise ParameterError(f"beta must be nonnegative, got {beta}")
    if e.grid != r.grid:
        raise ParameterError("ensemble and reward live on different grids")
    x = e.positions + drift(e.positions, r) * dt
    if beta > 0:
        x = x + math.sqrt(2.0 * beta * dt) * e.rng.standard_normal(e.N)
    return ParticleEnsemble(reflect(x, e.grid.lo, e.grid.hi), e.grid, e.rng, e.boundary)


def simulate(e: ParticleEnsemble, r: RewardField, beta: float, T: float,
             dt: float | None = None) -> ParticleEnsemble:
    """Advance to time ``T`` with equal steps no larger than ``dt``."""
    dt = default_dt(r, beta) if dt is None else dt
    if T <= 0:
        return e
    n = max(1, math.ceil(T / dt - 1e-9))
    for _ in range(n):
        e = langevin_step(e, r, beta, T / n)
    return e


def ensemble_to_measure(e: ParticleEnsemble, grid: ActionGrid | None = None) -> DiscreteMeasure:
    """Normalized cell-count histogram of the particle positions."""
    grid = e.grid if grid is None else grid
    if e.N == 0:
        raise ParameterError("empty ensemble")
    counts = np.bincount(grid.cell_of(e.positions), minlength=grid.n).astype(float)
    return DiscreteMeasure.from_weights(grid, counts)


def sample_variance(e: ParticleEnsemble) -> float:
    return float(np.var(e.positions))

