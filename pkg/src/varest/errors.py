"""Exception types shared across the package."""


class VarestError(Exception):
    """Base class for all errors raised by this package."""


class NonConvergence(VarestError):
    """An iterative solver stopped above its tolerance.

    Carries the last iterate so callers can fall back to it.
    """

    def __init__(self, message, x=None, residual=None, iterations=None):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class BreakdownNegativeCurvature(VarestError):
    """CG met a direction of non-positive curvature (operator not SPD)."""

    def __init__(self, message, x=None, iterations=None):
        super().__init__(message)
        self.x = x
        self.iterations = iterations


class LineSearchFailure(VarestError):
    """No step satisfying the Wolfe conditions was found."""

    def __init__(self, message, x=None, iterations=None):
        super().__init__(message)
        self.x = x
        self.iterations = iterations


class NonFiniteState(VarestError):
    """The model produced NaN/Inf during propagation."""

    def __init__(self, step):
        super().__init__(f"non-finite state after step {step}")
        self.step = step


class DimensionTooLarge(VarestError):
    """Finite-difference Jacobian assembly refused for large state sizes."""


class DimensionMismatch(VarestError):
    """Inputs disagree on vector/matrix dimensions."""


class NotPSD(VarestError):
    """A covariance matrix failed a positive-(semi)definiteness check."""


class NotAtOptimum(VarestError):
    """Estimation requested at a point that does not satisfy the
    first-order optimality conditions to the required tolerance."""

    def __init__(self, message, kkt_residual=None):
        super().__init__(message)
        self.kkt_residual = kkt_residual


class StabilityViolation(VarestError):
    """Explicit time step violates the integrator stability bound."""


class SingularConstraintJacobian(VarestError):
    """The constraint Jacobian with respect to the state is singular."""


class ConfigError(VarestError):
    """Malformed or inconsistent experiment configuration."""
