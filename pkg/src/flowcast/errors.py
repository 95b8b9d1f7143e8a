"""Exception types shared across the toolkit."""


class FlowcastError(Exception):
    """Base class for all toolkit errors."""


class ParseError(FlowcastError):
    """Malformed input data; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ValidationError(FlowcastError):
    """Input violates a bar or series invariant."""


class ConfigError(FlowcastError):
    """Inconsistent or unsupported configuration."""


class DataError(FlowcastError):
    """Missing or inconsistent market data at run time."""


class NumericalError(FlowcastError):
    """Non-finite value detected in a numerical pipeline."""


class WarmupError(FlowcastError):
    """Operation invoked before enough history has accumulated."""
