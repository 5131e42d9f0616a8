"""Exception hierarchy.

Each error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class DecompFuseError(Exception):
    exit_code = 1


class ContractError(DecompFuseError, ValueError):
    """Shapes, dims or argument types violate an operation's contract."""

    exit_code = 2


class ParameterError(DecompFuseError, ValueError):
    exit_code = 2


class ConfigurationError(DecompFuseError):
    exit_code = 2


class CheckpointError(DecompFuseError):
    exit_code = 2


class DataError(DecompFuseError):
    exit_code = 3


class DecodeError(DataError):
    pass


class FormatError(DataError):
    pass


class ExportError(DataError):
    pass


class NumericError(DecompFuseError, FloatingPointError):
    exit_code = 4
