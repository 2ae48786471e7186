"""Exception hierarchy shared by all modules.

The CLI maps each family to an exit code: configuration problems exit 2,
numerical failures exit 3 and file/validation problems exit 4.
"""


class TwincalError(Exception):
    """Base class for all package errors."""


class ConfigError(TwincalError, ValueError):
    """Invalid configuration value or conflicting options."""


class NumericalError(TwincalError, ArithmeticError):
    """A computation could not be completed reliably."""


class DomainError(NumericalError):
    """Input outside the validity range of a formula."""


class DegenerateGeometryError(NumericalError):
    """Zero or negative characteristic dimension."""


class NumericalInstabilityError(NumericalError):
    """Non-finite value produced while integrating the farm model."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class IllConditionedKernelError(NumericalError):
    """Cholesky factorisation failed even after the maximum jitter."""


class DegenerateLikelihoodError(NumericalError):
    """Every particle weight vanished after exponentiation."""

    def __init__(self, message, max_loglik=None):
        super().__init__(message)
        self.max_loglik = max_loglik


class DataError(TwincalError, ValueError):
    """Malformed or inconsistent input data (CSV schema, ordering, ranges)."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
