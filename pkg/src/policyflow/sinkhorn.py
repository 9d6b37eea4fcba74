"""Entropic optimal transport by Sinkhorn matrix balancing.

The regularized problem is

    min_{P in U(mu, nu)}  <C, P> + eps * sum_ij P_ij (log P_ij - 1)

with ``C_ij = |x_i - y_j|^2 / 2``.  Its solution has the diagonal-scaling form
``P = diag(u) K diag(v)`` with Gibbs kernel ``K = exp(-C / eps)``.  Dual
potentials are kept as ``f = eps log u`` and ``g = eps log v``; rows (columns)
with zero mass are removed before iterating and come back as zero rows
(columns) with ``f = -inf`` (``g = -inf``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, DomainError, NumericalError, ParameterError
from .measures import ActionGrid, DiscreteMeasure


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class CostMatrix:
    C: np.ndarray = field(repr=False)
    source: ActionGrid
    target: ActionGrid

    def __post_init__(self):
        C = np.array(self.C, dtype=float)
        if C.shape != (self.source.n, self.target.n):
            raise ParameterError(f"cost shape {C.shape} does not match grids")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)


def cost_matrix(source: ActionGrid, target: ActionGrid | None = None) -> CostMatrix:
    """Half squared distance between cell centres."""
    target = source if target is None else target
    x, y = source.centers, target.centers
    return CostMatrix(0.5 * (x[:, None] - y[None, :]) ** 2, source, target)


@dataclass(frozen=True)
class SinkhornParams:
    eps: float
    tol: float = 1e-9
    max_iter: int = 100_000
    log_domain: bool = False
    check_every: int = 10

    def __post_init__(self):
        if not self.eps > 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1 or self.check_every < 1:
            raise ParameterError("max_iter and check_every must be >= 1")


@dataclass(frozen=True, eq=False)
class Coupling:
    matrix: np.ndarray = field(repr=False)
    source: ActionGrid
    target: ActionGrid

    @property
    def row_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    f: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    plan: Coupling
    cost: float
    reg_cost: float
    iterations: int
    marginal_err: float
    converged: bool
    eps: float
    log_domain: bool
    C: CostMatrix = field(repr=False)
    mu: DiscreteMeasure = field(repr=False)
    nu: DiscreteMeasure = field(repr=False)

    @property
    def u(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.f / self.eps)

    @property
    def v(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.g / self.eps)


@dataclass(frozen=True, eq=False)
class PotentialPair:
    phi_mu: np.ndarray = field(repr=False)
    phi_nu: np.ndarray = field(repr=False)
    gauge: str = "mu-mean-zero"


def gibbs_kernel(C: CostMatrix, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    return np.exp(-C.C / eps)


def _entropic_terms(P, C, eps):
    pos = P > 0
    cost = float(np.sum(C * P))
    return cost, cost + eps * float(np.sum(P[pos] * (np.log(P[pos]) - 1.0)))


def _support(mu, nu, C):
    if C.source != mu.grid or C.target != nu.grid:
        raise ParameterError("cost matrix grids do not match the measures")
    I = np.flatnonzero(mu.w > 0)
    J = np.flatnonzero(nu.w > 0)
    return I, J, mu.w[I], nu.w[J], C.C[np.ix_(I, J)]


def _assemble(mu, nu, C, p, I, J, fs, gs, Ps, it, err):
    n, m = mu.grid.n, nu.grid.n
    f = np.full(n, -np.inf)
    g = np.full(m, -np.inf)
    f[I] = fs
    g[J] = gs
    P = np.zeros((n, m))
    P[np.ix_(I, J)] = Ps
    cost, reg = _entropic_terms(P, C.C, p.eps)
    return SinkhornResult(
        f=f, g=g, plan=Coupling(P, mu.grid, nu.grid), cost=cost, reg_cost=reg,
        iterations=it, marginal_err=err, converged=bool(err <= p.tol), eps=p.eps,
        log_domain=p.log_domain, C=C, mu=mu, nu=nu)


def sinkhorn(mu: DiscreteMeasure, nu: DiscreteMeasure, C: CostMatrix, p: SinkhornParams,
             g0: np.ndarray | None = None) -> SinkhornResult:
    """Alternate ``u = mu / (K v)``, ``v = nu / (K^T u)`` until the row marginal
    error drops below ``p.tol`` (checked every ``p.check_every`` sweeps).

    ``g0`` warm-starts the column potential.  Dispatches to the log-domain
    solver when ``p.log_domain`` is set.  Raises NumericalError when ``K v``
    underflows; the caller should then switch to the log domain.
    """
    if p.log_domain:
        return sinkhorn_log_domain(mu, nu, C, p, g0=g0)
    I, J, a, b, Cs = _support(mu, nu, C)
    K = np.exp(-Cs / p.eps)
    v = np.ones(len(J)) if g0 is None else np.exp(np.asarray(g0)[J] / p.eps)
    err = np.inf
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        while it < p.max_iter:
            it += 1
            Kv = K @ v
            u = a / Kv
            KTu = K.T @ u
            v = b / KTu
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(v > 0)
                    and np.all(u > 0)):
                raise NumericalError(
                    f"Gibbs kernel under/overflow at eps={p.eps:g} after {it} iterations; "
                    "rerun with log_domain=True")
            if it % p.check_every == 0 or it == p.max_iter:
                err = float(np.max(np.abs(u * (K @ v) - a)))
                if err <= p.tol:
                    break
        f = p.eps * np.log(u)
        g = p.eps * np.log(v)
    Ps = u[:, None] * K * v[None, :]
    err = max(float(np.max(np.abs(Ps.sum(1) - a))), float(np.max(np.abs(Ps.sum(0) - b))))
    res = _assemble(mu, nu, C, p, I, J, f, g, Ps, it, err)
    if not res.converged:
        warnings.warn(f"sinkhorn stopped after {it} iterations with marginal error {err:.3g}",
                      NonConvergenceWarning, stacklevel=2)
    return res


def sinkhorn_log_domain(mu: DiscreteMeasure, nu: DiscreteMeasure, C: CostMatrix,
                        p: SinkhornParams, g0: np.ndarray | None = None) -> SinkhornResult:
    """Same fixed point as :func:`sinkhorn`, iterated on ``f = eps log u`` and
    ``g = eps log v`` with log-sum-exp so that small ``eps`` cannot underflow."""
    I, J, a, b, Cs = _support(mu, nu, C)
    eps = p.eps
    la, lb = np.log(a), np.log(b)
    S = -Cs / eps
    g = np.zeros(len(J)) if g0 is None else np.asarray(g0, dtype=float)[J].copy()
    err = np.inf
    it = 0
    while it < p.max_iter:
        it += 1
        f = eps * (la - logsumexp(S + g[None, :] / eps, axis=1))
        g = eps * (lb - logsumexp(S + f[:, None] / eps, axis=0))
        if it % p.check_every == 0 or it == p.max_iter:
            row = np.exp(logsumexp(S + f[:, None] / eps + g[None, :] / eps, axis=1))
            err = float(np.max(np.abs(row - a)))
            if err <= p.tol:
                break
    Ps = np.exp(S + (f[:, None] + g[None, :]) / eps)
    err = max(float(np.max(np.abs(Ps.sum(1) - a))), float(np.max(np.abs(Ps.sum(0) - b))))
    if not p.log_domain:
        p = SinkhornParams(p.eps, p.tol, p.max_iter, True, p.check_every)
    res = _assemble(mu, nu, C, p, I, J, f, g, Ps, it, err)
    if not res.converged:
        warnings.warn(f"log-domain sinkhorn stopped after {it} iterations with marginal "
                      f"error {err:.3g}", NonConvergenceWarning, stacklevel=2)
    return res


def transport_cost(res: SinkhornResult) -> float:
    """``sum_ij u_i (K * C)_ij v_j``, i.e. the linear part ``<C, P>``."""
    if not res.converged:
        warnings.warn("transport cost of a non-converged Sinkhorn result",
                      NonConvergenceWarning, stacklevel=2)
    I = np.isfinite(res.f)
    J = np.isfinite(res.g)
    u, v = res.u[I], res.v[J]
    if res.log_domain or not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        # the scalings over/underflow when eps is small; the plan does not
        return float(np.sum(res.plan.matrix * res.C.C))
    C = res.C.C[np.ix_(I, J)]
    KC = np.exp(-C / res.eps) * C
    return float(u @ KC @ v)


def gradient_wrt_first_marginal(res: SinkhornResult) -> np.ndarray:
    """``eps log u`` shifted to sum to zero (tangent to the simplex)."""
    if not res.converged:
        raise ConvergenceError(
            f"gradient needs a converged result (marginal error {res.marginal_err:.3g})")
    if not np.all(np.isfinite(res.f)):
        raise DomainError("gradient needs a strictly positive first marginal")
    return res.f - res.f.mean()


def extract_potentials(res: SinkhornResult) -> PotentialPair:
    """Kantorovich potentials gauged so that ``sum_i mu_i phi_mu_i = 0``.

    ``phi_mu`` is ``eps log u`` shifted; ``phi_nu`` absorbs the opposite shift so
    ``phi_mu_i + phi_nu_j`` (and hence the plan) is unchanged.  Cells outside
    the support carry NaN.
    """
    if not res.converged:
        raise ConvergenceError(
            f"potentials need a converged result (marginal error {res.marginal_err:.3g})")
    mu_w = res.mu.w
    I = mu_w > 0
    shift = float(mu_w[I] @ res.f[I])
    phi_mu = np.where(I, res.f - shift, np.nan)
    phi_nu = np.where(res.nu.w > 0, res.g + shift, np.nan)
    return PotentialPair(phi_mu, phi_nu)


def sinkhorn_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, eps: float, *, tol: float = 1e-9,
                  max_iter: int = 100_000, log_domain: bool | None = None) -> SinkhornResult:
    """Convenience wrapper: build the cost, pick the domain, and solve.

    When ``eps`` is far below the grid's smallest nonzero cost, balancing
    converges very slowly; if it stalls, the result is finished with
    :func:`newton_polish` and a warning is raised only if that fails too.
    """
    C = cost_matrix(mu.grid, nu.grid)
    if log_domain is None:
        # plain kernel entries below ~1e-300 underflow to zero
        log_domain = C.C.max() / eps > 600.0
    # a short pass first: where balancing crawls, Newton from there is far cheaper
    first = min(max_iter, 2000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        res = sinkhorn(mu, nu, C, SinkhornParams(eps, tol, first, log_domain))
        if not res.converged:
            res = newton_polish(res, tol=tol)
        if not res.converged and max_iter > first:
            res = sinkhorn(mu, nu, C, SinkhornParams(eps, tol, max_iter - first, log_domain), g0=res.g)
            if not res.converged:
                res = newton_polish(res, tol=tol)
    if not res.converged:
        warnings.warn(f"sinkhorn stopped with marginal error {res.marginal_err:.3g}",
                      NonConvergenceWarning, stacklevel=2)
    return res


def newton_polish(res: SinkhornResult, tol: float = 1e-13, max_iter: int = 20) -> SinkhornResult:
    """Refine a Sinkhorn result by Newton steps on the dual potentials.

    Sinkhorn is a coordinate ascent whose linear rate degrades as ``eps``
    shrinks; near the solution a handful of Newton steps on the smooth dual
    ``<f, mu> + <g, nu> - eps sum exp((f + g - C) / eps)`` reach round-off.
    The last column potential is held fixed to remove the additive gauge.
    Steps are damped so that the dual objective increases.
    """
    mu, nu, C, eps = res.mu, res.nu, res.C, res.eps
    I, J, a, b, Cs = _support(mu, nu, C)
    f, g = res.f[I].copy(), res.g[J].copy()
    n, m = len(I), len(J)

    def plan(f, g):
        return np.exp((f[:, None] + g[None, :] - Cs) / eps)

    def dual(P, f, g):
        return float(a @ f + b @ g - eps * P.sum())

    P = plan(f, g)
    D = dual(P, f, g)
    err = max(float(np.max(np.abs(P.sum(1) - a))), float(np.max(np.abs(P.sum(0) - b))))
    it = 0
    while err > tol and it < max_iter and m > 1:
        it += 1
        rho = np.concatenate([a - P.sum(1), (b - P.sum(0))[:-1]])
        H = np.empty((n + m - 1, n + m - 1))
        H[:n, :n] = np.diag(P.sum(1))
        H[:n, n:] = P[:, :-1]
        H[n:, :n] = P[:, :-1].T
        H[n:, n:] = np.diag(P.sum(0)[:-1])
        try:
            d = eps * np.linalg.solve(H, rho)
        except np.linalg.LinAlgError:
            break
        df, dg = d[:n], np.append(d[n:], 0.0)
        ascent = float(rho @ d)
        if not ascent > 0:
            break
        t = 1.0
        while t > 1e-6:
            fn, gn = f + t * df, g + t * dg
            with np.errstate(over="ignore"):
                Pn = plan(fn, gn)
            Dn = dual(Pn, fn, gn)
            # the second test admits round-off level changes near convergence
            if np.isfinite(Dn) and (Dn >= D + 1e-4 * t * ascent
                                    or (t == 1.0 and Dn >= D - 1e-14 * max(1.0, abs(D)))):
                break
            t *= 0.5
        else:
            break
        f, g, P, D = fn, gn, Pn, Dn
        err = max(float(np.max(np.abs(P.sum(1) - a))), float(np.max(np.abs(P.sum(0) - b))))
    if not err < res.marginal_err:
        return res
    p = SinkhornParams(eps, tol=max(tol, 1e-300), log_domain=res.log_domain)
    return _assemble(mu, nu, C, p, I, J, f, g, P, res.iterations + it, err)


def sinkhorn_divergence(mu: DiscreteMeasure, nu: DiscreteMeasure, eps: float, *,
                        tol: float = 1e-10) -> float:
    """Debiased entropic transport ``OT(mu, nu) - (OT(mu, mu) + OT(nu, nu)) / 2``.

    ``OT`` is the regularized objective.  The result is nonnegative, vanishes
    when ``mu == nu`` and is a convenient distance between terminal measures.
    """
    if mu.grid == nu.grid and np.array_equal(mu.w, nu.w):
        return 0.0
    ab = sinkhorn_cost(mu, nu, eps, tol=tol).reg_cost
    aa = sinkhorn_cost(mu, mu, eps, tol=tol).reg_cost
    bb = sinkhorn_cost(nu, nu, eps, tol=tol).reg_cost
    return max(ab - 0.5 * (aa + bb), 0.0)
