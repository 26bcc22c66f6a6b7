"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataFormatError -> 2,
DivergenceError -> 3.
"""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, finiteness)."""


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class DataFormatError(ValueError):
    """A dataset or checkpoint file cannot be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced non-finite objectives and was aborted."""

    def __init__(self, message, last_good=None, report=None):
        super().__init__(message)
        self.last_good = last_good
        self.report = report
