"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KinauthError(Exception):
    exit_code = 1


class ConfigError(KinauthError):
    exit_code = 2


class DataError(KinauthError):
    exit_code = 3


class InsufficientDataError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(KinauthError):
    exit_code = 4
