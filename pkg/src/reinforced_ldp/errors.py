"""Exception types shared across the package."""


class SimplexViolation(ValueError):
    """Input is too far from the probability simplex to renormalize."""


class PositivityViolation(ValueError):
    """A kernel (or builder input) lacks the required strictly positive entries."""


class DimensionMismatch(ValueError):
    """Operands have incompatible state-space dimensions."""


class PolicyError(ValueError):
    """A control policy returned an invalid distribution."""


class InfeasibleTrajectory(ValueError):
    """A control drives the state trajectory out of the simplex."""


class PreconditionViolation(ValueError):
    """A documented operation precondition does not hold."""


class ResourceLimitExceeded(RuntimeError):
    """A configured memory or size cap would be exceeded."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""


class ConfigError(ValueError):
    """Invalid or inconsistent command-line configuration."""
