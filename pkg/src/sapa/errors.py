"""Exception types shared across the pipeline."""


class SapaError(Exception):
    """Base class for all toolkit errors."""


class DatasetParseError(SapaError):
    """A dataset file line could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DatasetSchemaError(SapaError):
    """A record or manifest violates the dataset schema."""


class InsufficientDataError(SapaError):
    """Not enough eligible data to perform an operation."""


class DomainError(SapaError):
    """Input outside an operation's mathematical domain (zero vector, edgeless graph)."""


class NumericError(SapaError):
    """Non-finite values encountered in numeric computation."""


class ConfigError(SapaError):
    """Invalid configuration file or option."""


class MissingArtifactError(SapaError):
    """A pipeline stage requires an artifact that does not exist."""
