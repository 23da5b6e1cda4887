"""Exception hierarchy shared across the package.

CLI exit codes map onto these classes: usage errors exit 1, DataError and
ConfigError exit 2, NumericalError (and subclasses) exit 3.
"""


class SgdlmError(Exception):
    """Base class for all package errors."""


class DataError(SgdlmError):
    """Malformed or inconsistent input data (prices, panels, ledgers)."""


class ConfigError(SgdlmError):
    """Invalid configuration file, preset, or parameter value."""


class NumericalError(SgdlmError):
    """Numerical failure: conditioning problems, singular systems, divergence."""


class ConstraintError(NumericalError):
    """Degenerate or inconsistent equality constraints in an optimization."""

    def __init__(self, message: str, constraint_index: int | None = None):
        super().__init__(message)
        self.constraint_index = constraint_index


class RuinError(NumericalError):
    """Portfolio simple return went non-positive; the strategy cannot continue."""
