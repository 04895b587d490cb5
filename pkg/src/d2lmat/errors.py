"""Exception hierarchy shared by the library and the CLI."""


class D2LError(Exception):
    """Base class for all errors raised by d2lmat."""


class DimensionError(D2LError, ValueError):
    """Array shapes do not line up."""


class ValidationError(D2LError, ValueError):
    """An input violates a documented precondition (non-binary labels, bad range, ...)."""


class ConfigError(D2LError, ValueError):
    """A configuration is invalid. ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DataError(D2LError, ValueError):
    """A data file could not be parsed. Carries 1-based row/column when known."""

    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"col {col}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
