"""Shared exception types for the tailcast pipeline."""


class TailcastError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(TailcastError):
    """Invalid run configuration (exit code 2 at the CLI)."""


class DataError(TailcastError):
    """Malformed or insufficient input data (exit code 3 at the CLI)."""


class NumericError(TailcastError):
    """Numerical failure: non-finite loss, failed fit, etc. (exit code 4)."""
