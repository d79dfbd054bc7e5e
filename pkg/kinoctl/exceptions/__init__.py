"""Error taxonomy for the kinoctl control stack.

Every error raised on purpose by the package derives from ``KinoctlError`` and
from the closest builtin exception, so callers can catch either.
"""


class KinoctlError(Exception):
    """Base class for all kinoctl errors."""


class ConfigError(KinoctlError, ValueError):
    """Configuration file or section is malformed or violates an invariant."""


class SimulationError(KinoctlError, ValueError):
    """The ground-truth simulator received an invalid state or command."""


class HistoryGap(KinoctlError, LookupError):
    """A timestamped history does not cover the requested time span."""


class WindowRange(KinoctlError, ValueError):
    """A trajectory is too short for the requested training window(s)."""


class DimensionError(KinoctlError, ValueError):
    """Array shapes do not match the network or window layout."""


class DatasetError(KinoctlError, ValueError):
    """Dataset is empty or a dataset file is malformed."""


class NumericalFailure(KinoctlError, ArithmeticError):
    """The least-squares solver could not make numerical progress."""


class StaleSolution(KinoctlError, RuntimeError):
    """An optimized control sequence expired before it could be applied."""

    def __init__(self, message: str, age: float = 0.0, horizon: float = 0.0):
        super().__init__(message)
        self.age = age
        self.horizon = horizon


class StampOrderError(KinoctlError, ValueError):
    """A timestamped estimate does not come after the newest one already buffered."""
