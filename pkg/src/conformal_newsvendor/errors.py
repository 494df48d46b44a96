"""Exception hierarchy.

The CLI maps these onto exit codes: :class:`ConfigError` -> 2,
:class:`DataError` -> 3, :class:`NumericalError` -> 4.
"""


class NewsvendorError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(NewsvendorError, ValueError):
    """Invalid configuration or argument combination."""


class DataError(NewsvendorError, ValueError):
    """Malformed, missing or insufficient data."""


class InsufficientDataError(DataError):
    """A split or pool received fewer rows than it needs."""


class EmptyPoolError(DataError):
    """A radius pooling query found no calibration points."""

    def __init__(self, xi, message=None):
        self.xi = xi
        super().__init__(message or f"empty pooling region for diameter xi={xi!r}")


class DegenerateTreeError(ConfigError):
    """Tree settings cannot produce a single valid leaf."""


class NumericalError(NewsvendorError, ArithmeticError):
    """A numerical routine failed to produce an answer."""


class NoCrossingError(NumericalError):
    """Bisection bracket never changed sign."""

    def __init__(self, g_low, g_high, message=None):
        self.g_low = g_low
        self.g_high = g_high
        super().__init__(
            message or f"no crossing: g(lower)={g_low!r}, g(upper)={g_high!r}"
        )


class IntervalEscapesError(NumericalError):
    """Confidence-interval half width pushes a level outside (0, 1)."""

    def __init__(self, z, alpha):
        self.z = z
        self.alpha = alpha
        super().__init__(f"interval escapes (0,1): z={z!r} with alpha={alpha!r}")
