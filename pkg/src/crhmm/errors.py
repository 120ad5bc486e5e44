"""Exception types shared across the package.

Each error class carries the process exit code the CLI uses when it escapes.
"""


class CRHMMError(Exception):
    exit_code = 1


class ConfigError(CRHMMError, ValueError):
    exit_code = 2


class DataError(CRHMMError, ValueError):
    exit_code = 3


class NumericError(CRHMMError, ArithmeticError):
    exit_code = 4


class DomainError(CRHMMError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""

    exit_code = 4


class DecodingError(NumericError):
    pass


class BlbError(NumericError):
    pass
