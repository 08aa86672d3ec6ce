"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Inputs with incompatible shapes."""


class CapacityError(MemoryError):
    """A requested dense object would exceed the configured size limit."""

    def __init__(self, message, requested=None):
        super().__init__(message)
        self.requested = requested


class DegenerateFactorError(ValueError):
    """A factor matrix has zero Frobenius norm."""


class InvalidValueError(ValueError):
    """Non-finite input where finite values are required."""


class DivergenceError(RuntimeError):
    """Stochastic iterates blew up; ``trace`` holds what was recorded so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(ValueError):
    """Invalid environment or experiment configuration."""
