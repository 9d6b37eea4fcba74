"""Slow reference solvers for optimal transport, used as test oracles.

All costs use ``c(x, y) = |x - y|^2 / 2``; a reported "W2^2" is therefore half
of the textbook squared Wasserstein distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .measures import DiscreteMeasure
from .sinkhorn import Coupling

BRUTE_FORCE_MAX_ENTRIES = 16


@dataclass(frozen=True, eq=False)
class MonotoneCoupling:
    """Co-monotone transport plan stored as sorted ``(i, j, mass)`` triples."""

    i: np.ndarray
    j: np.ndarray
    mass: np.ndarray

    def __len__(self):
        return len(self.mass)

    def to_matrix(self, n: int, m: int) -> np.ndarray:
        P = np.zeros((n, m))
        np.add.at(P, (self.i, self.j), self.mass)
        return P


def quantile_coupling(a: np.ndarray, b: np.ndarray) -> MonotoneCoupling:
    """North-west-corner merge of two mass vectors on sorted supports."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ii, jj, mm = [], [], []
    i = j = 0
    ra, rb = (a[0] if len(a) else 0.0), (b[0] if len(b) else 0.0)
    while i < len(a) and j < len(b):
        if ra <= 0.0:
            i += 1
            ra = a[i] if i < len(a) else 0.0
            continue
        if rb <= 0.0:
            j += 1
            rb = b[j] if j < len(b) else 0.0
            continue
        t = min(ra, rb)
        ii.append(i)
        jj.append(j)
        mm.append(t)
        ra -= t
        rb -= t
        # the smaller residual is exhausted; snap round-off residue on the other side
        if ra <= rb:
            ra = 0.0
        else:
            rb = 0.0
    return MonotoneCoupling(np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64), np.array(mm))


def w2_exact_1d(mu: DiscreteMeasure, nu: DiscreteMeasure):
    """Exact half-squared W2 between measures on (possibly different) 1-D grids.

    Returns ``(cost, plan)``.  In one dimension the quantile coupling is optimal
    for every convex cost.
    """
    plan = quantile_coupling(mu.w, nu.w)
    x = mu.grid.centers[plan.i]
    y = nu.grid.centers[plan.j]
    cost = 0.5 * float(np.sum(plan.mass * (x - y) ** 2))
    return cost, plan


def w2_gaussian_closed_form(m1: float, s1: float, m2: float, s2: float) -> float:
    if s1 <= 0 or s2 <= 0:
        raise ParameterError("standard deviations must be positive")
    return 0.5 * ((m1 - m2) ** 2 + (s1 - s2) ** 2)


def entropic_objective(P: np.ndarray, C: np.ndarray, eps: float) -> float:
    """``<C, P> + eps * sum P (log P - 1)``, with ``0 log 0 = 0``."""
    pos = P > 0
    return float(np.sum(C * P) + eps * np.sum(P[pos] * (np.log(P[pos]) - 1.0)))


def brute_force_entropic_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, eps: float, *,
                            init: np.ndarray | None = None, tol: float = 1e-12,
                            max_iter: int = 500) -> Coupling:
    """Entropic OT by damped Newton on the transport polytope (tiny problems only).

    The minimizer of ``<C, P> + eps * sum P (log P - 1)`` over couplings of
    ``(mu, nu)`` is found by Newton steps restricted to the null space of the
    marginal constraints, starting from ``init`` (default ``mu nu^T``).  Stops
    once the tangent gradient, measured as ``sqrt(sum P g^2)`` after projecting
    out the marginal directions, is below ``tol``.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    n, m = mu.grid.n, nu.grid.n
    if n * m > BRUTE_FORCE_MAX_ENTRIES:
        raise ParameterError(
            f"brute force limited to n*m <= {BRUTE_FORCE_MAX_ENTRIES} (got {n}x{m}); use sinkhorn")
    x, y = mu.grid.centers, nu.grid.centers
    C = 0.5 * (x[:, None] - y[None, :]) ** 2

    I = np.flatnonzero(mu.w > 0)
    J = np.flatnonzero(nu.w > 0)
    a, b = mu.w[I], nu.w[J]
    Cs = C[np.ix_(I, J)]
    p, q = len(I), len(J)

    if init is None:
        P = np.outer(a, b)
    else:
        P = np.array(init, dtype=float)[np.ix_(I, J)]
        if np.any(P <= 0):
            raise ParameterError("init must be strictly positive on the support")
        if (np.abs(P.sum(1) - a).max() > 1e-12 or np.abs(P.sum(0) - b).max() > 1e-12):
            raise ParameterError("init must have marginals (mu, nu)")
    if p > 1 and q > 1:
        # marginal operator on the flattened plan, minus one redundant row
        A = np.vstack([np.kron(np.eye(p), np.ones(q)), np.kron(np.ones(p), np.eye(q))])[:-1]
        c = Cs.ravel()

        def obj(v):
            return float(c @ v + eps * np.sum(v * (np.log(v) - 1.0)))

        v = P.ravel()
        for _ in range(max_iter):
            g = c + eps * np.log(v)
            # Newton step with Hessian eps/v under A d = 0, via its KKT system:
            # d = -(v/eps)(g - A^T lam), (A V A^T) lam = A V g.  Unlike a
            # null-space basis this stays well scaled when entries of v are tiny.
            AV = A * v[None, :]
            lam = np.linalg.solve(AV @ A.T, AV @ g)
            proj = g - A.T @ lam
            d = -(v / eps) * proj
            # tangent gradient norm measured in the metric of the entropy
            if math.sqrt(float(np.sum(v * proj * proj))) <= tol:
                break
            t = 1.0
            neg = d < 0
            if np.any(neg):
                t = min(1.0, 0.99 * float(np.min(-v[neg] / d[neg])))
            f0 = obj(v)
            slope = float(g @ d)
            # inside the quadratic-convergence region the objective change is
            # below round-off, so Armijo cannot discriminate: take the step
            local = -slope < 1e-10
            while t > 1e-16:
                vn = v + t * d
                if np.all(vn > 0) and (local or obj(vn) <= f0 + 1e-4 * t * slope):
                    break
                t *= 0.5
            else:
                break
            v = vn
        P = v.reshape(p, q)
    else:
        P = np.outer(a, b)

    out = np.zeros((n, m))
    out[np.ix_(I, J)] = P
    return Coupling(out, mu.grid, nu.grid)
