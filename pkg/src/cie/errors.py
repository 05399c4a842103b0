"""Exception hierarchy shared across the package."""


class CIEError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CIEError, ValueError):
    pass


class ContractViolation(CIEError, ValueError):
    """A precondition of an operation was not met by the caller."""


class InvalidMatrixError(CIEError, ValueError):
    pass


class ContextOverflowError(CIEError, ValueError):
    pass


class NumericOverflowError(CIEError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class CheckpointError(CIEError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class SchemaError(CIEError, ValueError):
    def __init__(self, message, line=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.line = line
        self.path = path


class DivergenceError(CIEError, ArithmeticError):
    """Training loss became non-finite."""
