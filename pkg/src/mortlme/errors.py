"""Exception hierarchy shared across the package."""


class MortlmeError(Exception):
    """Base class for all package-specific errors."""


class ParseError(MortlmeError):
    """Raised when an input file cannot be parsed."""


class ValidationError(MortlmeError):
    """Raised when parsed or constructed data violates an invariant."""


class DataError(MortlmeError):
    """Raised when requested data is missing or unusable."""


class ConfigError(MortlmeError):
    """Raised when a configuration file is invalid; names the failing key."""
