"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A layer or network was configured with incompatible dimensions."""


class UsageError(ValueError):
    """An operation was called with arguments violating its contract."""


class FormatError(ValueError):
    """A netpbm file, manifest or config file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CorruptCheckpointError(ValueError):
    """A checkpoint failed magic, version, length or checksum validation."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class NumericError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""
