"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigurationError(ValueError):
    """A configuration value violates a documented constraint."""


class UsageError(RuntimeError):
    """An API was called outside its precondition."""


class IntegrityError(ValueError):
    """A persisted file is malformed or truncated."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InsufficientDataError(ValueError):
    """A series is too short for the requested windows."""


class UndefinedMetricError(ValueError):
    """No entries qualify for a metric."""


class GradCheckError(RuntimeError):
    """A finite-difference check could not be carried out."""
