"""Exception hierarchy shared by all tpnet modules.

The CLI maps these onto exit codes: configuration problems exit with 2,
runtime / numeric / shape problems with 3 and I/O problems with 4.
"""


class TPNError(Exception):
    """Base class for every error raised deliberately by tpnet."""


class ConfigError(TPNError, ValueError):
    """An invalid configuration value. The message names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(TPNError, ValueError):
    pass


class NumericError(TPNError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    pass


class DataError(TPNError, ValueError):
    pass


class DatasetIOError(TPNError, OSError):
    """Missing, empty or corrupt on-disk data. The message carries the path."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")
