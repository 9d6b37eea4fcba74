"""Action grids, policies on them, and the entropy-regularized reward functional.

Conventions
-----------
A policy is stored as cell masses ``w`` (summing to one); its piecewise-constant
density is ``w / h``.  Entropy uses the convex sign, ``H(pi) = sum w log(w/h)``,
so the free energy ``J = K_r - beta * H`` is *maximized* by the Gibbs policy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, ParameterError

MASS_TOL = 1e-12


@dataclass(frozen=True)
class ActionGrid:
    """Uniform cell-centred grid on ``[lo, hi]`` with ``n`` cells."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise ParameterError(f"need finite hi > lo, got lo={self.lo}, hi={self.hi}")
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 2:
            raise ParameterError(f"need an integer cell count n >= 2, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.n

    @cached_property
    def centers(self) -> np.ndarray:
        c = self.lo + (np.arange(self.n) + 0.5) * self.h
        c.setflags(write=False)
        return c

    def cell_of(self, x) -> np.ndarray:
        """Index of the cell containing each action (clipped to the grid)."""
        idx = np.floor((np.asarray(x, dtype=float) - self.lo) / self.h).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)


def make_grid(lo: float, hi: float, n: int) -> ActionGrid:
    return ActionGrid(float(lo), float(hi), n)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability masses ``w`` on the cells of ``grid``."""

    grid: ActionGrid
    w: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = _frozen(self.w)
        if w.shape != (self.grid.n,):
            raise ParameterError(f"weights have shape {w.shape}, grid has {self.grid.n} cells")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise ParameterError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "w", w)

    @classmethod
    def from_weights(cls, grid: ActionGrid, w) -> "DiscreteMeasure":
        """Normalize nonnegative weights (any positive total) into a measure."""
        w = np.asarray(w, dtype=float)
        if w.shape != (grid.n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("weights must be a finite nonnegative vector of length n")
        total = w.sum()
        if total <= 0:
            raise ParameterError("weights have zero total mass")
        w = w / total
        # one extra pass pulls the sum to within a few ulps of 1
        return cls(grid, w / w.sum())

    @classmethod
    def uniform(cls, grid: ActionGrid) -> "DiscreteMeasure":
        return cls(grid, np.full(grid.n, 1.0 / grid.n))

    @classmethod
    def point_mass(cls, grid: ActionGrid, k: int) -> "DiscreteMeasure":
        w = np.zeros(grid.n)
        w[k] = 1.0
        return cls(grid, w)

    @property
    def density(self) -> np.ndarray:
        return self.w / self.grid.h

    def mean(self) -> float:
        return float(self.w @ self.grid.centers)

    def variance(self) -> float:
        c = self.grid.centers - self.mean()
        return float(self.w @ (c * c))

    def is_positive(self) -> bool:
        return bool(np.all(self.w > 0))


@dataclass(frozen=True, eq=False)
class RewardField:
    """Deterministic reward sampled at the cell centres."""

    grid: ActionGrid
    r: np.ndarray = field(repr=False)

    def __post_init__(self):
        r = _frozen(self.r)
        if r.shape != (self.grid.n,):
            raise ParameterError(f"reward has shape {r.shape}, grid has {self.grid.n} cells")
        if not np.all(np.isfinite(r)):
            raise ParameterError("reward values must be finite")
        object.__setattr__(self, "r", r)

    @classmethod
    def from_function(cls, grid: ActionGrid, fn) -> "RewardField":
        return cls(grid, np.asarray(fn(grid.centers), dtype=float))

    @cached_property
    def gradient(self) -> np.ndarray:
        """Action-gradient at the centres (centred inside, one-sided at the walls)."""
        return np.gradient(self.r, self.grid.h)


@dataclass(frozen=True)
class FreeEnergyBreakdown:
    expected_reward: float
    entropy: float
    beta: float
    free_energy: float


@dataclass(frozen=True, eq=False)
class FirstVariationField:
    grid: ActionGrid
    density: np.ndarray = field(repr=False)
    velocity: np.ndarray = field(repr=False)


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise ParameterError(f"grid mismatch: {a.grid} vs {b.grid}")


def _check_beta(beta):
    if not (beta > 0 and math.isfinite(beta)):
        raise ParameterError(f"beta must be a positive finite number, got {beta}")


def gibbs_policy(r: RewardField, beta: float) -> DiscreteMeasure:
    """Energy-based optimum ``w_i ∝ exp(r_i / beta)``."""
    _check_beta(beta)
    z = r.r / beta
    z = z - z.max()
    return DiscreteMeasure.from_weights(r.grid, np.exp(z))


def expected_reward(pi: DiscreteMeasure, r: RewardField) -> float:
    _check_same_grid(pi, r)
    return float(pi.w @ r.r)


def _xlogy_sum(w, h):
    pos = w > 0
    return float(np.sum(w[pos] * np.log(w[pos] / h)))


def entropy(pi: DiscreteMeasure) -> float:
    """Convex-sign differential entropy of the piecewise-constant density."""
    return _xlogy_sum(pi.w, pi.grid.h)


def free_energy(pi: DiscreteMeasure, r: RewardField, beta: float) -> FreeEnergyBreakdown:
    _check_beta(beta)
    k = expected_reward(pi, r)
    H = entropy(pi)
    return FreeEnergyBreakdown(k, H, beta, k - beta * H)


def first_variation(pi: DiscreteMeasure, r: RewardField, beta: float) -> FirstVariationField:
    """``dJ/dpi = r - beta (1 + log p)`` and its action-gradient.

    Raises DomainError when a cell has zero mass.
    """
    _check_beta(beta)
    _check_same_grid(pi, r)
    if not pi.is_positive():
        raise DomainError("first variation needs a strictly positive policy (log 0 in a cell)")
    dens = r.r - beta * (1.0 + np.log(pi.w / pi.grid.h))
    vel = np.gradient(dens, pi.grid.h, edge_order=1)
    return FirstVariationField(pi.grid, _frozen(dens), _frozen(vel))


def kl_divergence(p: DiscreteMeasure, q: DiscreteMeasure) -> float:
    """``sum p log(p/q)``; returns ``math.inf`` when p is not absolutely continuous w.r.t. q."""
    _check_same_grid(p, q)
    pos = p.w > 0
    if np.any(q.w[pos] <= 0):
        return math.inf
    # difference of logs: the ratio overflows when q is subnormal
    return max(float(np.sum(p.w[pos] * (np.log(p.w[pos]) - np.log(q.w[pos])))), 0.0)


def total_variation(p: DiscreteMeasure, q: DiscreteMeasure) -> float:
    _check_same_grid(p, q)
    return 0.5 * float(np.abs(p.w - q.w).sum())
