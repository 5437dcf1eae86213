"""Exception hierarchy shared by every pipeline stage.

The CLI maps these onto process exit codes: configuration problems exit
with 2, backend failures with 3, and bad data with 4.
"""


class PromptfuseError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(PromptfuseError):
    """Invalid experiment or CLI configuration."""

    exit_code = 2


class BackendError(PromptfuseError):
    """A model backend is unreachable or returned a malformed response."""

    exit_code = 3


class DataError(PromptfuseError):
    """Invalid dataset content or inconsistent pipeline inputs."""

    exit_code = 4


class ParseError(DataError):
    """A manifest line is not well-formed JSON."""


class ValidationError(DataError):
    """A parsed record violates a dataset invariant."""
