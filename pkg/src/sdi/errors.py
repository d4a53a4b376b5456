"""Exception types raised across the package."""


class SDIError(Exception):
    """Base class for all errors raised by :mod:`sdi`."""


class NotPositiveDefinite(SDIError, ValueError):
    pass


class DimensionMismatch(SDIError, ValueError):
    pass


class BadLabel(SDIError, ValueError):
    pass


class BudgetExceeded(SDIError, RuntimeError):
    """The quadrature rule would need more nodes than the configured cap."""


class DegenerateMass(SDIError, RuntimeError):
    """The normalizer of an unnormalized density underflowed on every node."""


class IndefiniteCurvature(SDIError, ValueError):
    pass


class CavityNotNormalizable(SDIError, ValueError):
    pass


class DivergentIntegral(SDIError, ValueError):
    pass


class MaxIterations(SDIError, RuntimeError):
    """Iteration budget exhausted; carries the best-so-far result."""

    def __init__(self, message, result=None, trace=None):
        super().__init__(message)
        self.result = result
        self.trace = trace


class ConfigError(SDIError, ValueError):
    pass
