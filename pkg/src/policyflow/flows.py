"""Policy iteration as proximal stepping, and flow orchestration.

A W2 proximal (JKO) step from ``pi_k`` solves

    min_pi  OT_eps(pi, pi_k) / tau - J(pi),

where ``OT_eps`` is the entropic transport objective with cost ``|x-y|^2 / 2``
(so ``OT / tau`` is the usual ``W2^2 / (2 tau)``).  Two independent solvers
are provided:

* ``jko_step_mirror`` works on the simplex with multiplicative updates driven
  by the Sinkhorn gradient ``eps log u``;
* ``jko_step_coupling`` works in coupling space, alternating a row rescaling
  with the closed-form KL proximal map of the free energy on the columns.

``kl_trust_region_step`` is the same proximal step with ``KL(pi | pi_k)`` in
place of the transport cost; it has a closed form.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, DomainError, NumericalError, ParameterError
from .fokker_planck import FokkerPlanckOperator, FPScheme
from .langevin import ensemble_to_measure, init_particles, langevin_step
from .measures import DiscreteMeasure, RewardField, _check_beta, _check_same_grid, first_variation
from .sinkhorn import (NonConvergenceWarning, SinkhornParams, SinkhornResult, cost_matrix,
                       newton_polish, sinkhorn)
from .trace import FlowTrace

MAX_CLAMPS = 10
STEPPERS = ("jko-mirror", "jko-coupling", "kl-trust-region", "fokker-planck", "langevin")


@dataclass(frozen=True)
class InnerParams:
    """Sub-solver settings for the JKO steppers.

    ``method`` selects the simplex update direction for ``jko-mirror``:
    ``"newton"`` preconditions the gradient with the exact Hessian of the
    proximal objective, ``"mirror"`` is plain exponentiated gradient with step
    ``eta`` (default ``0.5 tau / (1 + beta)``) halved on objective increase.
    """

    tol: float = 1e-9
    max_iter: int = 100
    eta: float | None = None
    method: str = "newton"
    sinkhorn_tol: float = 1e-13
    sinkhorn_max_iter: int = 500_000
    log_domain: bool | None = None

    def __post_init__(self):
        if self.method not in ("newton", "mirror"):
            raise ParameterError(f"unknown inner method {self.method!r}")
        if not (self.tol > 0 and self.sinkhorn_tol > 0):
            raise ParameterError("tolerances must be positive")
        if self.max_iter < 1:
            raise ParameterError("inner max_iter must be >= 1")
        if self.eta is not None and not self.eta > 0:
            raise ParameterError("eta must be positive")


@dataclass(frozen=True)
class FlowParams:
    beta: float
    tau: float
    eps: float = 1e-2
    n_steps: int = 100
    inner: InnerParams = field(default_factory=InnerParams)
    stride: int = 1

    def __post_init__(self):
        for name in ("beta", "tau", "eps"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ParameterError(f"{name} must be positive and finite, got {v}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ParameterError("n_steps must be a positive integer")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ParameterError("stride must be a positive integer")

    @property
    def eta(self) -> float:
        return self.inner.eta if self.inner.eta is not None else 0.5 * self.tau / (1 + self.beta)


@dataclass(frozen=True)
class LangevinParams:
    N: int = 200_000
    seed: int = 0
    dt: float | None = None


@dataclass(frozen=True, eq=False)
class JKOSolution:
    measure: DiscreteMeasure
    residual: float
    iterations: int
    converged: bool
    transport: SinkhornResult | None = field(default=None, repr=False)


def _use_log_domain(C, p: FlowParams) -> bool:
    if p.inner.log_domain is not None:
        return p.inner.log_domain
    return C.C.max() / p.eps > 600.0


def _require_positive(pi_k):
    if not pi_k.is_positive():
        raise DomainError("proximal steps need a strictly positive current policy")


def _tangent_norm(G, w):
    c = G - w @ G
    return math.sqrt(float(w @ (c * c)))


class _MirrorObjective:
    """``Phi(w) = OT_eps(w, pi_k) / tau - <r, w> + beta sum w log(w/h)`` with a warm-started transport."""

    def __init__(self, pi_k, r, p):
        self.pi_k, self.r, self.p = pi_k, r, p
        self.grid = pi_k.grid
        self.C = cost_matrix(self.grid)
        self.sp = SinkhornParams(p.eps, tol=p.inner.sinkhorn_tol,
                                 max_iter=p.inner.sinkhorn_max_iter,
                                 log_domain=_use_log_domain(self.C, p))
        self.g0 = None

    def __call__(self, w):
        p, h = self.p, self.grid.h
        pi = DiscreteMeasure(self.grid, w)
        res = _transport(pi, self.pi_k, self.C, self.sp, self.g0)
        self.g0 = res.g
        logw = np.log(w / h)
        phi = res.reg_cost / p.tau - self.r.r @ w + p.beta * float(w @ logw)
        G = res.f / p.tau - self.r.r + p.beta * (1.0 + logw)
        return phi, G, res


def _transport(pi, pi_k, C, sp, g0=None) -> SinkhornResult:
    """Entropic transport ``pi -> pi_k`` solved to ``sp.tol``.

    A few Sinkhorn sweeps give a starting point for Newton steps on the dual,
    which converge quadratically; plain Sinkhorn to full tolerance is the
    fallback when the Newton refinement stalls.
    """
    loose = SinkhornParams(sp.eps, tol=max(sp.tol, 1e-3), max_iter=50, log_domain=sp.log_domain)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        res = newton_polish(sinkhorn(pi, pi_k, C, loose, g0=g0), tol=sp.tol)
        if res.marginal_err > sp.tol:
            res = newton_polish(sinkhorn(pi, pi_k, C, sp, g0=g0), tol=sp.tol)
    if not res.marginal_err <= sp.tol:
        raise ConvergenceError(
            f"inner Sinkhorn did not converge (marginal error {res.marginal_err:.3g})")
    return res


def _normalized(w):
    w = w / w.sum()
    return w / w.sum()


def solve_jko_mirror(pi_k: DiscreteMeasure, r: RewardField, p: FlowParams,
                     init: DiscreteMeasure | None = None) -> JKOSolution:
    """Multiplicative simplex iteration for the entropic JKO step.

    Stops when the tangent norm ``sqrt(sum w (G - <w, G>)^2)`` of the
    objective gradient ``G = f/tau - r + beta (1 + log(w/h))`` falls below
    ``p.inner.tol``.
    """
    _check_same_grid(pi_k, r)
    _require_positive(pi_k)
    obj = _MirrorObjective(pi_k, r, p)
    w = (pi_k if init is None else init).w.copy()
    phi, G, res = obj(w)
    eta = p.eta
    resid = _tangent_norm(G, w)
    it = 0
    while resid > p.inner.tol and it < p.inner.max_iter:
        it += 1
        # f carries an arbitrary additive constant; remove it so round-off in
        # sum(dw) cannot flip the sign of the slope
        G = G - w @ G
        if p.inner.method == "newton":
            P = res.plan.matrix
            M = np.diag(w) - (P / pi_k.w[None, :]) @ P.T
            A = (p.eps / p.tau) * np.eye(len(w)) + p.beta * M / w[None, :]
            dw = np.linalg.solve(A, -(M @ G))
            d = dw / w
            slope = float(G @ dw)
            t = 1.0
        else:
            d = -(G - G.mean())
            slope = float(G @ (w * (d - w @ d)))
            t = eta
        if slope >= 0:
            break
        newton = p.inner.method == "newton"
        # near the optimum the predicted decrease drops below the round-off of
        # OT/tau, so a step that halves the gradient without a visible increase
        # is accepted as well
        noise = 1e-11 * max(1.0, abs(phi))
        accepted = False
        while t >= 1e-12:
            w_new = _normalized(w * np.exp(np.clip(t * d, -50.0, 50.0)))
            try:
                phi_new, G_new, res_new = obj(w_new)
            except ConvergenceError:
                t *= 0.5
                continue
            if phi_new <= phi + 1e-4 * slope * (t if newton else t / eta):
                accepted = True
            elif (newton and phi_new <= phi + noise
                  and _tangent_norm(G_new, w_new) < 0.5 * resid):
                accepted = True
            if accepted:
                break
            t *= 0.5
        if not accepted:
            break
        if p.inner.method == "mirror":
            eta = t
        w, phi, G, res = w_new, phi_new, G_new, res_new
        resid = _tangent_norm(G, w)
    return JKOSolution(DiscreteMeasure(pi_k.grid, w), resid, it, resid <= p.inner.tol, res)


def jko_step_mirror(pi_k: DiscreteMeasure, r: RewardField, p: FlowParams) -> DiscreteMeasure:
    """Entropic W2 proximal step solved on the simplex (warns if not converged)."""
    sol = solve_jko_mirror(pi_k, r, p)
    if not sol.converged:
        warnings.warn(f"jko-mirror inner solve stopped at residual {sol.residual:.3g}",
                      NonConvergenceWarning, stacklevel=2)
    return sol.measure


def kl_prox_log(log_q: np.ndarray, r: np.ndarray, beta: float, h: float, sigma: float) -> np.ndarray:
    """Log of the probability vector minimizing ``sigma F(p) + KL(p | q)``.

    With ``F(p) = -<r, p> + beta sum p log(p/h)`` the minimizer is
    ``p ∝ (q exp(sigma r) h^(sigma beta))^(1 / (1 + sigma beta))``.
    """
    z = (log_q + sigma * r + sigma * beta * math.log(h)) / (1.0 + sigma * beta)
    return z - logsumexp(z)


def solve_jko_coupling(pi_k: DiscreteMeasure, r: RewardField, p: FlowParams,
                       tol: float | None = None, max_iter: int = 1_000_000) -> JKOSolution:
    """Entropic JKO step in coupling space.

    Minimizes ``KL(gamma | K) + sigma F(gamma^T 1)`` over couplings with first
    marginal ``pi_k`` (``sigma = tau / eps``) by alternating the row projection
    ``u = pi_k / (K v)`` and the column update ``v = prox(K^T u) / (K^T u)``.
    Returns the second marginal.  ``tol`` bounds the row-marginal violation.
    """
    _check_same_grid(pi_k, r)
    _require_positive(pi_k)
    tol = p.inner.sinkhorn_tol if tol is None else tol
    grid = pi_k.grid
    C = cost_matrix(grid)
    eps, h, beta = p.eps, grid.h, p.beta
    sigma = p.tau / eps
    a = pi_k.w
    la = np.log(a)
    it = 0
    err = math.inf
    if not _use_log_domain(C, p):
        K = np.exp(-C.C / eps)
        v = np.ones(grid.n)
        with np.errstate(over="raise", divide="raise", invalid="raise"):
            try:
                while it < max_iter:
                    it += 1
                    u = a / (K @ v)
                    q = K.T @ u
                    lp = kl_prox_log(np.log(q), r.r, beta, h, sigma)
                    v = np.exp(lp) / q
                    if it % 10 == 0:
                        err = float(np.max(np.abs(u * (K @ v) - a)))
                        if err <= tol:
                            break
            except FloatingPointError as exc:
                raise NumericalError(f"coupling JKO under/overflow ({exc}); use log_domain") from exc
    else:
        S = -C.C / eps
        g = np.zeros(grid.n)
        while it < max_iter:
            it += 1
            f = eps * (la - logsumexp(S + g[None, :] / eps, axis=1))
            log_q = logsumexp(S + f[:, None] / eps, axis=0)
            lp = kl_prox_log(log_q, r.r, beta, h, sigma)
            g = eps * (lp - log_q)
            if it % 10 == 0:
                row = np.exp(logsumexp(S + (f[:, None] + g[None, :]) / eps, axis=1))
                err = float(np.max(np.abs(row - a)))
                if err <= tol:
                    break
    out = DiscreteMeasure.from_weights(grid, np.exp(lp))
    return JKOSolution(out, err, it, err <= tol)


def jko_step_coupling(pi_k: DiscreteMeasure, r: RewardField, p: FlowParams) -> DiscreteMeasure:
    """Entropic W2 proximal step solved by alternating KL projections in coupling space."""
    sol = solve_jko_coupling(pi_k, r, p)
    if not sol.converged:
        warnings.warn(f"jko-coupling stopped with marginal error {sol.residual:.3g}",
                      NonConvergenceWarning, stacklevel=2)
    return sol.measure


def kl_trust_region_step(pi_k: DiscreteMeasure, r: RewardField, beta: float, tau: float) -> DiscreteMeasure:
    """Closed-form minimizer of ``KL(pi | pi_k) / (2 tau) - J(pi)``:
    ``w ∝ (w_k exp(2 tau r) h^(2 tau beta))^(1 / (1 + 2 tau beta))``."""
    _check_beta(beta)
    _check_same_grid(pi_k, r)
    _require_positive(pi_k)
    if not tau > 0:
        raise ParameterError("tau must be positive")
    s = 2.0 * tau
    z = (np.log(pi_k.w) + s * r.r + s * beta * math.log(pi_k.grid.h)) / (1.0 + s * beta)
    return DiscreteMeasure.from_weights(pi_k.grid, np.exp(z - z.max()))


def optimality_spread(pi: DiscreteMeasure, pi_k: DiscreteMeasure, r: RewardField,
                      p: FlowParams) -> float:
    """Spread across cells of ``-dJ/dpi + phi / tau`` for a candidate step ``pi_k -> pi``.

    ``phi = eps log u`` comes from the transport ``pi -> pi_k``; the quantity is
    constant at the exact JKO minimizer, so its standard deviation measures
    distance from optimality.
    """
    C = cost_matrix(pi.grid)
    sp = SinkhornParams(p.eps, tol=p.inner.sinkhorn_tol, max_iter=p.inner.sinkhorn_max_iter,
                        log_domain=_use_log_domain(C, p))
    res = _transport(pi, pi_k, C, sp)
    dens = first_variation(pi, r, p.beta).density
    return float(np.std(-dens + res.f / p.tau))


class _Stepper:
    def __init__(self, name, pi0, r, p, scheme, langevin):
        self.name, self.r, self.p = name, r, p
        self.warnings = []
        if name == "fokker-planck":
            self.op = FokkerPlanckOperator(r, p.beta, scheme or FPScheme())
            self.n_sub = max(1, math.ceil(p.tau / self.op.dt - 1e-9))
        elif name == "langevin":
            lp = langevin or LangevinParams()
            self.ens = init_particles(pi0, lp.N, lp.seed)
            dt = lp.dt
            if dt is None:
                from .langevin import default_dt
                dt = default_dt(r, p.beta)
            self.n_sub = max(1, math.ceil(p.tau / dt - 1e-9))
        elif name not in STEPPERS:
            raise ParameterError(f"unknown stepper {name!r}; choose from {STEPPERS}")

    def __call__(self, k, pi):
        p, r = self.p, self.r
        if self.name == "jko-mirror":
            sol = solve_jko_mirror(pi, r, p)
        elif self.name == "jko-coupling":
            sol = solve_jko_coupling(pi, r, p)
        elif self.name == "kl-trust-region":
            return kl_trust_region_step(pi, r, p.beta, p.tau)
        elif self.name == "fokker-planck":
            w = pi.w
            for _ in range(self.n_sub):
                w = self.op.advance(w, p.tau / self.n_sub)
            if self.op.clamp_count > MAX_CLAMPS:
                raise NumericalError(f"persistent negativity in {self.op.clamp_count} substeps")
            return DiscreteMeasure(pi.grid, w)
        else:
            e = self.ens
            for _ in range(self.n_sub):
                e = langevin_step(e, r, p.beta, p.tau / self.n_sub)
            self.ens = e
            return ensemble_to_measure(e, pi.grid)
        if not sol.converged:
            self.warnings.append(f"step {k}: inner solve not converged (residual {sol.residual:.3g})")
        return sol.measure


def run_flow(pi0: DiscreteMeasure, r: RewardField, p: FlowParams, stepper: str, *,
             scheme: FPScheme | None = None, langevin: LangevinParams | None = None,
             diag_eps: float | None = None, callback=None) -> FlowTrace:
    """Iterate ``stepper`` for ``p.n_steps`` steps of length ``p.tau``.

    Diagnostics are recorded at step 0, every ``p.stride`` steps and at the
    end.  A numerical failure stops the run and returns the partial trace with
    ``failed`` set.
    """
    _check_same_grid(pi0, r)
    step = _Stepper(stepper, pi0, r, p, scheme, langevin)
    trace = FlowTrace(r, p.beta, stepper=stepper, diag_eps=diag_eps)
    trace.record(0, 0.0, pi0)
    pi = pi0
    for k in range(1, p.n_steps + 1):
        try:
            pi = step(k, pi)
        except (NumericalError, DomainError) as exc:
            trace.failed = True
            trace.error = f"step {k}: {exc}"
            # keep the last good iterate so the partial trace ends where the run did
            if trace.steps[-1] != k - 1:
                trace.record(k - 1, (k - 1) * p.tau, pi)
            break
        if k % p.stride == 0 or k == p.n_steps:
            trace.record(k, k * p.tau, pi)
            if callback is not None:
                callback(trace)
    trace.warnings.extend(step.warnings)
    if stepper == "fokker-planck" and step.op.clamp_count:
        trace.warnings.append(f"clamped negative mass in {step.op.clamp_count} substeps")
    return trace
