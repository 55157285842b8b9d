"""Typed errors raised across the package.

Every invariant violation surfaces as one of these, never as a silent repair.
The CLI maps all of them to exit code 2.
"""


class ConformalError(Exception):
    """Base class for all validation errors."""


class FormatError(ConformalError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedLayout(ConformalError):
    pass


class DegenerateRow(ConformalError):
    def __init__(self, index, reason="row norm below 1e-12"):
        self.index = index
        super().__init__(f"row {index}: {reason}")


class DuplicateId(ConformalError):
    def __init__(self, row_id, line=None):
        self.row_id = row_id
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate id {row_id!r}{where}")


class ShapeError(ConformalError, ValueError):
    pass


class ConfigError(ConformalError, ValueError):
    pass


class DegenerateQuery(ConformalError):
    pass


class UndefinedAuroc(ConformalError):
    pass


class IoError(ConformalError, OSError):
    pass
