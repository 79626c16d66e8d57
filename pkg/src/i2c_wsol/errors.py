"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class I2CError(Exception):
    exit_code = 1


class UsageError(I2CError):
    """Wrong call sequence, e.g. backward on a non-scalar or a step without grads."""

    exit_code = 1


class ConfigError(I2CError, ValueError):
    exit_code = 2


class InputError(I2CError, ValueError):
    exit_code = 1


class BoundsError(InputError, IndexError):
    pass


class DataFormatError(I2CError):
    """Malformed or mismatched on-disk artifact (dataset, checkpoint, bank)."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(I2CError, ArithmeticError):
    exit_code = 4
