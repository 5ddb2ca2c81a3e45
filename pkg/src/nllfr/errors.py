"""Exception types raised across the package."""


class NllfrError(Exception):
    """Base class for all package errors."""


class DimensionError(NllfrError, ValueError):
    """Array shapes do not agree with the model dimensions."""

    def __init__(self, signal, expected, got):
        self.signal = signal
        self.expected = expected
        self.got = got
        super().__init__(f"{signal}: expected shape {expected}, got {got}")


class StabilityError(NllfrError):
    """A model required to be stable is not."""


class ExcitationError(NllfrError):
    """The data does not excite the system enough for the requested operation."""


class ConfigError(NllfrError, ValueError):
    """Invalid or mutually inconsistent configuration values."""


class DivergenceError(NllfrError):
    """An iterative procedure produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataFormatError(NllfrError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
