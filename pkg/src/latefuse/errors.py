"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration (bad fold counts, empty grids, unknown ids)."""


class DataFormatError(ValueError):
    """Malformed dataset file; message carries the offending row where known."""


class DegenerateDesignError(ArithmeticError):
    """Estimating equation has a numerically zero curvature term."""


class IllConditionedError(ArithmeticError):
    """Jacobian condition number too large to take a reliable step."""


class OrientationError(ArithmeticError):
    """Curvature matrix has a meaningfully negative eigenvalue."""


class NumericalError(ArithmeticError):
    """Internal numerical routine failed (should be unreachable on valid input)."""


class FederationViolation(RuntimeError):
    """A message between nodes and server failed the privacy schema check."""

    def __init__(self, description: str, audit=None):
        super().__init__(description)
        self.description = description
        self.audit = audit
