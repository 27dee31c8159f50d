"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: usage/config -> 1, I/O -> 2,
data/parse -> 3, numeric -> 4.
"""


class CareError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class ConfigError(CareError):
    """Bad configuration value or unknown config key."""

    exit_code = 1


class InputError(CareError):
    """Missing or unreadable input file."""

    exit_code = 2


class ParseError(CareError):
    """Malformed log content. Carries the 1-based line number when known."""

    exit_code = 3

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DataError(CareError):
    """Inconsistent data passed between pipeline stages."""

    exit_code = 3


class ShapeError(CareError):
    """Tensor shape mismatch inside the differentiation engine."""

    exit_code = 3


class NumericError(CareError):
    """Non-finite values encountered during optimization."""

    exit_code = 4
