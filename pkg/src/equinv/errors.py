"""Exception types raised across the package."""


class EquinvError(Exception):
    pass


class InvalidArgument(EquinvError, ValueError):
    pass


class NumericError(EquinvError, ArithmeticError):
    pass


class GenerationFailure(EquinvError, RuntimeError):
    pass


class ParseError(EquinvError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(EquinvError, ValueError):
    pass


class UnsupportedVersion(EquinvError):
    pass


class CorruptCheckpoint(EquinvError):
    pass
