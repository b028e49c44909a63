"""
Error types shared across the toolkit.
Each carries the process exit code the CLI reports for it.
"""


class DefnError(Exception):
    """Base class for toolkit failures"""
    exit_code = 1


class ConfigError(DefnError, ValueError):
    """Invalid run configuration, flag combination or checkpoint/config mismatch"""
    exit_code = 2


class DataError(DefnError, ValueError):
    """Unreadable, inconsistent or degenerate input data"""
    exit_code = 3


class NumericError(DefnError, ArithmeticError):
    """Non-finite values where finite ones are required"""
    exit_code = 4
