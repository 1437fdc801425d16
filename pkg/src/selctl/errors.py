"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class ConfigError(ValueError):
    """Bad or missing configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Bad input data: malformed files, insufficient items (CLI exit code 3)."""


class NumericalAbort(RuntimeError):
    """Non-finite values on the learning path (CLI exit code 4)."""

    def __init__(self, message, task_ids=None):
        super().__init__(message)
        self.task_ids = list(task_ids) if task_ids is not None else []


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
