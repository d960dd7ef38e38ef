"""
Exception hierarchy for the gags package.

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional


class GagsError(Exception):
    """Base class for every error raised by gags."""

    exit_code = 1


class ConfigError(GagsError):
    """Invalid, incomplete or unknown configuration."""

    exit_code = 2


class DataError(GagsError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 3


class FormatError(DataError):
    pass


class EmptyFieldError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class IngestError(DataError):
    pass


class MissingInputError(DataError):
    pass


class MissingGroundTruthError(DataError):
    pass


class UnsetMinDepthError(DataError):
    pass


class NumericError(GagsError):
    """A loss or gradient became NaN or infinite."""

    exit_code = 4

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path
