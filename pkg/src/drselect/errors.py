"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a structural invariant."""


class InfeasibleError(RuntimeError):
    """Raised when a requested construction cannot be realized."""


class OracleBudgetError(RuntimeError):
    """Raised when an exhaustive oracle would exceed its enumeration budget."""
