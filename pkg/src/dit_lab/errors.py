"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class LoadError(ValueError):
    """A dataset file could not be parsed."""


class DivergenceError(RuntimeError):
    """Training or influence propagation produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UndefinedCorrelationError(ValueError):
    """A correlation coefficient is undefined for the given inputs (zero variance, all ties)."""
