"""Exception types shared across the package."""


class BSDELabError(Exception):
    pass


class InvalidInputError(BSDELabError, ValueError):
    """Malformed input such as a non-monotone grid or mismatched ensembles."""


class ConfigurationError(BSDELabError, ValueError):
    """Parameters that are individually valid but inconsistent."""


class UnsupportedError(BSDELabError, NotImplementedError):
    pass


class DiagnosticsError(BSDELabError, ArithmeticError):
    """Regression or finite-difference diagnostics that cannot be rescued."""


class DivergenceError(BSDELabError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalInstabilityError(BSDELabError, ArithmeticError):
    pass


class DomainError(BSDELabError, ValueError):
    pass
