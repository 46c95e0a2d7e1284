"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class PointScatterError(Exception):
    """Base class for all package errors."""


class DomainError(PointScatterError, ValueError):
    """Input lies outside the domain where an operation is defined."""


class SingularInputError(DomainError):
    """Input sits on (or beyond) a singular point of a closed form."""


class UsageError(PointScatterError, ValueError):
    """Operation called with an invalid combination of arguments."""


class WindowRangeError(PointScatterError, IndexError):
    """Query falls outside the stored retarded-time window of a field."""


class ConvergenceError(PointScatterError, RuntimeError):
    """Fixed-point iteration failed to reach tolerance.

    Attributes
    ----------
    history : list of float
        Sup-norm increments, one entry per iteration.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class RejectionError(PointScatterError, ValueError):
    """Data rejected by a consistency check (e.g. non-radial backscatter)."""
