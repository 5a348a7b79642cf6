"""Exception hierarchy for the contact model, solvers and experiment tooling."""

from typing import Any, Optional


class TrajOptError(Exception):
    """Base class for all errors raised by fdlc_trajopt."""


# --- Model errors ---


class ModelError(TrajOptError):
    pass


class DegenerateDirection(ModelError):
    """The two FDLC points coincide; the spring direction is undefined."""

    def __init__(self, distance: float, threshold: float):
        super().__init__(
            f"Spring endpoints are {distance:.3e} m apart (threshold {threshold:.1e} m)."
        )
        self.distance = distance
        self.threshold = threshold


# --- Solver failures ---


class SolverFailure(TrajOptError):
    """Numerical failure in the lower- or upper-level solver."""


class MaxIterationsExceeded(SolverFailure):
    def __init__(self, message: str, residual_norm: float, kappa: float):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.kappa = kappa


class NonFiniteIterate(SolverFailure):
    def __init__(self, message: str, trajectory: Optional[Any] = None):
        super().__init__(message)
        self.trajectory = trajectory


class SingularJacobian(SolverFailure):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class NotPositiveDefinite(SolverFailure):
    """Regularized Q_uu failed its Cholesky factorization at some time step."""

    def __init__(self, step: int):
        super().__init__(f"Q_uu is not positive definite at step {step}.")
        self.step = step


class RegularizationExhausted(SolverFailure):
    def __init__(self, message: str, trajectory: Optional[Any] = None):
        super().__init__(message)
        self.trajectory = trajectory


# --- Validation failures ---


class ValidationFailure(TrajOptError):
    """Input files or objects do not satisfy their documented contract."""


class SchemaMismatch(ValidationFailure):
    pass


class GoalMismatch(ValidationFailure):
    def __init__(self, goal_a: float, goal_b: float):
        super().__init__(
            f"Reports were produced for different goals ({goal_a:.6f} vs {goal_b:.6f} rad)."
        )
        self.goal_a = goal_a
        self.goal_b = goal_b


class UnknownConfigKey(ValidationFailure):
    """A --set override names a key the configuration schema does not have."""

    def __init__(self, key: str):
        super().__init__(f"Unknown configuration key '{key}'.")
        self.key = key
