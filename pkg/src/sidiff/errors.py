class SidiffError(Exception):
    """Base class for all package errors."""


class ConfigError(SidiffError):
    """Invalid configuration or argument combination."""


class DataError(SidiffError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """Binary artifact with a bad magic, version or layout."""
