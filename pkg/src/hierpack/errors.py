"""Exception hierarchy shared by every module."""


class HierPackError(Exception):
    """Base class; ``category`` is what the CLI reports."""

    category = "error"


class DimensionError(HierPackError, ValueError):
    category = "dimension"


class ValidationError(HierPackError, ValueError):
    category = "validation"


class FormatError(ValidationError):
    category = "format"


class UsageError(HierPackError, RuntimeError):
    category = "usage"


class NumericError(HierPackError, FloatingPointError):
    """Raised when a loss turns non-finite during training."""

    category = "numeric"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
