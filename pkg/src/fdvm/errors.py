"""Exception types shared across the package.

The CLI maps these onto process exit codes; library callers can catch them
individually.
"""


class FdvmError(Exception):
    """Base class for all package errors."""


class ShapeError(FdvmError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(FdvmError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(FdvmError):
    """An API precondition was violated (e.g. non-scalar loss, missing grad)."""


class ConfigError(FdvmError):
    """Invalid configuration value or unknown option key."""


class FormatError(FdvmError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InputError(FdvmError):
    """Bad user-supplied input (missing files, empty source directory, ...)."""


class NumericError(FdvmError):
    """Non-finite values where finite ones are required."""
