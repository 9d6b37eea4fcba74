"""Finite-volume solver for  d_t pi = -div(pi grad r) + beta * Laplacian(pi).

Masses live at cell centres; the flux through the interface between cells
``i`` and ``i+1`` is ``F = A_i w_i - B_i w_{i+1}`` (mass per unit time) and
both walls carry zero flux.  Three interface discretizations are available:

``exponential``  Scharfetter-Gummel (exponential fitting).  The grid Gibbs
                 policy ``w ∝ exp(r / beta)`` is an exact zero of the
                 operator, so the discrete steady state is the Gibbs policy.
``upwind``       first-order upwind drift plus centred diffusion.
``centered``     second-order centred drift and diffusion (not positivity
                 preserving for cell Peclet numbers above 2).

The generator matrix has nonnegative off-diagonals for the first two, so
both explicit Euler under the stability bound and implicit Euler for any
``dt`` are Markov transitions: positivity is preserved and the free energy
cannot decrease.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import DomainError, NumericalError, ParameterError, StabilityError
from .measures import DiscreteMeasure, RewardField, _check_beta, _check_same_grid
from .trace import FlowTrace

FLUXES = ("exponential", "upwind", "centered")
METHODS = ("explicit", "implicit")
# name used in configs for the linearly-implicit (backward Euler) update
_METHOD_ALIASES = {"semi-implicit": "implicit"}

NEG_TOL = 1e-13


@dataclass(frozen=True)
class FPScheme:
    """Time discretization.  ``dt=None`` picks 0.4x the explicit stability bound."""

    dt: float | None = None
    method: str = "explicit"
    flux: str = "exponential"

    def __post_init__(self):
        method = _METHOD_ALIASES.get(self.method, self.method)
        if method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.flux not in FLUXES:
            raise ParameterError(f"unknown flux {self.flux!r}; choose from {FLUXES}")
        if self.dt is not None and not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "method", method)


def bernoulli(x: np.ndarray) -> np.ndarray:
    """``x / (exp(x) - 1)`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    big = np.abs(x) > 1e-8
    # expm1 overflows to inf for x > ~709, where the exact value is 0 anyway
    with np.errstate(over="ignore"):
        out[big] = x[big] / np.expm1(x[big])
    small = ~big
    out[small] = 1.0 - 0.5 * x[small]
    return out


def interface_rates(r: RewardField, beta: float, flux: str = "exponential"):
    """Return ``(A, B)`` with ``F_{i+1/2} = A_i w_i - B_i w_{i+1}``."""
    h = r.grid.h
    dr = np.diff(r.r)
    if flux == "exponential":
        x = dr / beta
        return beta / h**2 * bernoulli(-x), beta / h**2 * bernoulli(x)
    v = dr / h
    d = beta / h**2
    if flux == "upwind":
        return np.maximum(v, 0.0) / h + d, np.maximum(-v, 0.0) / h + d
    if flux == "centered":
        return v / (2 * h) + d, -v / (2 * h) + d
    raise ParameterError(f"unknown flux {flux!r}")


def apply_operator(w: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Mass rate of change ``dw/dt`` under no-flux walls."""
    F = A * w[:-1] - B * w[1:]
    dw = np.zeros_like(w)
    dw[:-1] -= F
    dw[1:] += F
    return dw


def stability_bound(r: RewardField, beta: float) -> float:
    """Largest explicit step: ``0.5 h^2 / (beta + h max|grad r|)``."""
    h = r.grid.h
    slope = max(np.max(np.abs(np.diff(r.r))) / h, np.max(np.abs(r.gradient)))
    return 0.5 * h * h / (beta + h * slope)


class FokkerPlanckOperator:
    """Precomputed one-step propagator for a fixed reward, temperature and scheme."""

    def __init__(self, r: RewardField, beta: float, scheme: FPScheme = FPScheme()):
        _check_beta(beta)
        self.r = r
        self.beta = beta
        self.scheme = scheme
        self.bound = stability_bound(r, beta)
        self.dt = 0.4 * self.bound if scheme.dt is None else scheme.dt
        if scheme.method == "explicit" and self.dt > self.bound * (1 + 1e-12):
            raise StabilityError(self.dt, self.bound)
        self.A, self.B = interface_rates(r, beta, scheme.flux)
        self.clamp_count = 0
        self._banded = {}

    def _implicit_matrix(self, dt):
        if dt not in self._banded:
            n = self.r.grid.n
            A, B = self.A, self.B
            diag = np.ones(n)
            diag[:-1] += dt * A
            diag[1:] += dt * B
            ab = np.zeros((3, n))
            ab[0, 1:] = -dt * B        # superdiagonal: inflow from i+1
            ab[1] = diag
            ab[2, :-1] = -dt * A       # subdiagonal: inflow from i-1
            self._banded[dt] = ab
        return self._banded[dt]

    def advance(self, w: np.ndarray, dt: float | None = None) -> np.ndarray:
        dt = self.dt if dt is None else dt
        if self.scheme.method == "explicit":
            if dt > self.bound * (1 + 1e-12):
                raise StabilityError(dt, self.bound)
            new = w + dt * apply_operator(w, self.A, self.B)
        else:
            new = solve_banded((1, 1), self._implicit_matrix(dt), w)
        lo = new.min()
        if lo < 0:
            if lo < -NEG_TOL:
                self.clamp_count += 1
            new = np.maximum(new, 0.0)
        total = new.sum()
        if not math.isfinite(total) or total <= 0:
            raise NumericalError("Fokker-Planck update lost all mass")
        return new / total


def fp_step(pi: DiscreteMeasure, r: RewardField, beta: float, s: FPScheme = FPScheme()) -> DiscreteMeasure:
    """One conservative finite-volume update.

    Raises StabilityError for an explicit step above the stability bound.
    """
    _check_same_grid(pi, r)
    op = FokkerPlanckOperator(r, beta, s)
    return DiscreteMeasure(pi.grid, op.advance(pi.w))


def fp_solve(pi0: DiscreteMeasure, r: RewardField, beta: float, T: float,
             s: FPScheme = FPScheme(), *, stride: int = 1, diag_eps: float | None = None,
             record_times=None, max_clamps: int = 10) -> FlowTrace:
    """Integrate to horizon ``T`` and record diagnostics.

    Each interval between observation times is split into equal substeps no
    larger than the scheme's ``dt``.  Without ``record_times`` the observation
    times are every ``stride`` substeps of ``[0, T]`` plus ``T`` itself.  More
    than ``max_clamps`` steps with negativity beyond round-off is a numerical
    failure; the partial trace is attached to the exception.
    """
    _check_same_grid(pi0, r)
    if T < 0:
        raise ParameterError("T must be nonnegative")
    op = FokkerPlanckOperator(r, beta, s)
    trace = FlowTrace(r, beta, stepper="fokker-planck", diag_eps=diag_eps)
    trace.record(0, 0.0, pi0)
    if T == 0:
        return trace
    if record_times is None:
        n = max(1, math.ceil(T / op.dt - 1e-9))
        dt = T / n
        segments = [(min(k + stride, n) - k, dt, T * min(k + stride, n) / n)
                    for k in range(0, n, stride)]
    else:
        marks = sorted({float(t) for t in record_times if 0 < t < T} | {float(T)})
        segments = []
        prev = 0.0
        for t in marks:
            n = max(1, math.ceil((t - prev) / op.dt - 1e-9))
            segments.append((n, (t - prev) / n, t))
            prev = t
    w = pi0.w
    k = 0
    for count, dt, t_end in segments:
        for _ in range(count):
            w = op.advance(w, dt)
            k += 1
            if op.clamp_count > max_clamps:
                trace.failed = True
                trace.error = f"persistent negativity (< -{NEG_TOL:g}) in {op.clamp_count} steps"
                err = NumericalError(trace.error)
                err.trace = trace
                raise err
        trace.record(k, t_end, DiscreteMeasure(pi0.grid, w))
    if op.clamp_count:
        trace.warnings.append(f"clamped negative mass in {op.clamp_count} steps")
    return trace


def stationary_residual(pi: DiscreteMeasure, r: RewardField, beta: float,
                        flux: str = "exponential") -> float:
    """Sup-norm of ``d_t pi`` (density units) under the discrete operator."""
    _check_beta(beta)
    _check_same_grid(pi, r)
    if not pi.is_positive():
        raise DomainError("stationary residual needs a strictly positive policy")
    A, B = interface_rates(r, beta, flux)
    return float(np.max(np.abs(apply_operator(pi.w, A, B)))) / pi.grid.h
