"""Exception hierarchy. CLI exit codes are attached to each class."""


class CasCnnError(Exception):
    exit_code = 1


class ConfigError(CasCnnError, ValueError):
    exit_code = 2


class DataError(CasCnnError, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class NumericError(CasCnnError, ArithmeticError):
    exit_code = 4


class DimensionError(CasCnnError, ValueError):
    """Shape mismatch between operands; ``axis`` names the offending axis."""

    exit_code = 4

    def __init__(self, op, axis, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {axis} mismatch (expected {expected}, got {got})")


class UsageError(CasCnnError, RuntimeError):
    pass
