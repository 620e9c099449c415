class MtdError(Exception):
    """Base class for library errors."""

    exit_code = 3


class DataError(MtdError):
    """Unreadable or inconsistent input data."""

    exit_code = 2

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" (byte offset {offset})"
            where += ": "
        super().__init__(where + message)


class PlacementError(DataError):
    """Occurrences could not be placed at the requested density."""


class NumericalError(MtdError):
    """An optimization or update produced an unusable result."""

    exit_code = 3
