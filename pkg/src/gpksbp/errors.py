"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """A model parameter is outside its support (e.g. a non-positive scale)."""


class NumericalError(ArithmeticError):
    """A covariance matrix could not be factorized."""


class InvalidStateError(RuntimeError):
    """Sampler state violates an invariant it relies on."""


class RunawayTruncationError(InvalidStateError):
    """The stick loop exceeded its hard cap on the truncation level."""


class DomainError(ValueError):
    """An input lies outside a test function's domain."""


class ConfigError(ValueError):
    """A run configuration is inconsistent."""


class TraceFormatError(ValueError):
    """A trace or CSV file does not match the expected schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RefactorizationWarning(UserWarning):
    """A rank-1 inverse update hit a tiny pivot and fell back to a full inverse."""
