"""Exception hierarchy mapped to CLI exit codes (config=2, data=3, numerical=4)."""


class DualspaceError(Exception):
    """Base class for package errors."""


class ConfigError(DualspaceError):
    """Invalid or inconsistent run configuration."""


class DataError(DualspaceError):
    """Missing, malformed, or contract-violating input data."""


class NumericalError(DualspaceError):
    """Numerical failure: non-finite loss, factorization breakdown, etc."""
