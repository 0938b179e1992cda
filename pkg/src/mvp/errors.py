"""Exception types shared across the package."""


class MVPError(Exception):
    """Base class for all package errors."""


class ContractError(MVPError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class FormatError(MVPError):
    """A file could not be parsed.

    ``offset`` is a byte offset for binary formats, ``line`` a 1-based line
    number for text formats; whichever does not apply is None.
    """

    def __init__(self, message, *, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class ChecksumError(FormatError):
    """A checkpoint payload does not match its stored checksum."""
