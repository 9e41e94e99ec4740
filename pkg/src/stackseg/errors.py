"""Error types shared across the package."""


class ConfigError(ValueError):
    """A shape, wiring, or hyperparameter combination that can never work."""


class UsageError(RuntimeError):
    """An API called out of order (e.g. backward before forward)."""


class DataError(ValueError):
    """Input data violating its contract (bad labels, corrupt files, ...)."""


class DivergenceError(ArithmeticError):
    """Training hit a non-finite loss; carries the first offending head."""
