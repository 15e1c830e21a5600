"""Exception hierarchy shared by every module."""


class MGFError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MGFError, ValueError):
    pass


class UsageError(MGFError, RuntimeError):
    pass


class NumericOverflowError(MGFError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class SecondOrderError(MGFError, NotImplementedError):
    pass


class StructureError(MGFError, ValueError):
    """Two parameter vectors do not share a segment table."""


class ConfigError(MGFError, ValueError):
    pass


class TaskError(MGFError, ValueError):
    """A task cannot supply the requested samples."""


class ParseError(MGFError, ValueError):
    """Malformed binary input; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class MetricError(MGFError, ValueError):
    pass
