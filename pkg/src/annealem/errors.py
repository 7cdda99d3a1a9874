"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Raised when model parameters or run configuration are invalid."""


class NumericalError(RuntimeError):
    """Raised when a linear-algebra step fails (non-SPD matrix, overflow).

    The message names the offending component (and bead mode, where
    applicable) so failures in multi-component fits are attributable.
    """


class MonotonicityError(AssertionError):
    """Raised by the audit harness when an objective sequence increases."""
