"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: unknown names, bad sizes, out-of-range values."""


class DataError(ValueError):
    """Numeric data violates a contract (non-finite, negative, degenerate)."""


class ParseError(DataError):
    """A delimited text file could not be parsed; message carries row/column."""


class DivergenceError(RuntimeError):
    """An ensemble became non-finite during integration or filtering."""


class ExternalModelError(RuntimeError):
    """An external forecasting process misbehaved (timeout, bad reply)."""
