"""Exception hierarchy shared by every module."""


class UlabError(Exception):
    pass


class InputError(UlabError, ValueError):
    pass


class DimensionError(InputError):
    pass


class LabelError(InputError):
    pass


class ConsistencyError(InputError):
    pass


class FormatError(UlabError, ValueError):
    """Raised when a binary file does not match the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(UlabError, ArithmeticError):
    """A non-finite value showed up while building the graph."""

    def __init__(self, op, message=None):
        super().__init__(message or f"non-finite value produced by '{op}'")
        self.op = op
