"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
subclasses) -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input data (parse failures, empty inputs, bad ids)."""


class ShapeError(DataError):
    """Dimension mismatch between arrays; message names both shapes."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""
