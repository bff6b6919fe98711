"""Exception types shared across the package."""


class FinePruneError(Exception):
    """Base class for all package errors."""


class ShapeError(FinePruneError, ValueError):
    """Incompatible layer, state or input shapes."""


class NumericError(FinePruneError, ArithmeticError):
    """A non-finite value appeared during training.

    ``layer`` is the index of the first layer whose output went non-finite,
    or the last layer when only the loss itself is bad.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ConditioningError(FinePruneError, ArithmeticError):
    """Kernel matrix could not be factorized even after jitter escalation."""


class StateError(FinePruneError, RuntimeError):
    """Operation called on an object in the wrong state (e.g. unfitted model)."""


class ParseError(FinePruneError, ValueError):
    """Malformed input file. Carries the offending location when known."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(FinePruneError, ValueError):
    """Invalid configuration key or value."""
