"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class MsdmError(Exception):
    exit_code = 1


class ConfigError(MsdmError):
    """Bad configuration or usage (exit code 1)."""

    exit_code = 1


class Unreachable(ConfigError):
    """No branch plan reaches the requested receptive field."""


class ShapeMismatch(ConfigError):
    pass


class DataError(MsdmError):
    """Problems with input rasters or tables (exit code 2)."""

    exit_code = 2


class OutOfBounds(DataError):
    pass


class NodataInWindow(DataError):
    pass


class DegenerateBand(DataError):
    pass


class UnknownSpecies(DataError):
    pass


class FormatError(DataError):
    pass


class MismatchedUniverse(DataError):
    pass


class NumericalError(MsdmError):
    """Non-finite or out-of-domain numbers (exit code 3)."""

    exit_code = 3


class NumericalDomain(NumericalError):
    pass


class NoForwardState(RuntimeError):
    pass
