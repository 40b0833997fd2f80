"""Exception hierarchy shared across the pipeline.

The CLI maps each family onto its own exit code, so library code raises the
most specific class it can.
"""


class EgospeakError(Exception):
    """Base class for all package errors."""


class ConfigError(EgospeakError, ValueError):
    """Bad parameters, unknown config keys, missing input paths."""


class DataError(EgospeakError, ValueError):
    """Input data is malformed or unusable (bad audio, degenerate labels)."""


class NumericalError(EgospeakError, ArithmeticError):
    """A training loss or gradient became non-finite."""
