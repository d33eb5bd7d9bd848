"""Exception types raised across the package."""


class DomainError(ValueError):
    """Input outside the domain of an operation (bad index, shape, mode...)."""


class ResourceError(RuntimeError):
    """An oracle-scale routine was asked to materialize too much data."""


class NumericalError(ArithmeticError):
    """A factorization that should always succeed did not."""


class ParseError(ValueError):
    """Malformed line in an input file."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DivergenceError(RuntimeError):
    """The objective became non-finite; carries the last finite iterate."""

    def __init__(self, message, last_factors=None, history=None):
        super().__init__(message)
        self.last_factors = last_factors
        self.history = history
