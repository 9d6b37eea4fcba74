"""Exception hierarchy shared by all modules."""


class ParameterError(ValueError):
    """An argument violates a documented precondition."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation (e.g. log 0)."""


class NumericalError(ArithmeticError):
    """A solver failed numerically (underflow, non-convergence, negativity)."""


class StabilityError(ParameterError, NumericalError):
    """Explicit time step exceeds the scheme's stability bound."""

    def __init__(self, dt, bound):
        self.dt = dt
        self.bound = bound
        super().__init__(
            f"explicit time step dt={dt:.6g} exceeds stability bound {bound:.6g} "
            "(dt <= 0.5*h^2/(beta + h*max|grad r|))"
        )


class ConvergenceError(NumericalError):
    """A result that did not converge was used where convergence is required."""
