"""Exception hierarchy shared by the library and the command line front end.

Each class carries the process exit code the CLI uses when it escapes.
"""


class PMCNetError(Exception):
    exit_code = 1


class ConfigError(PMCNetError, ValueError):
    """Invalid or inconsistent configuration / precondition violation."""

    exit_code = 3


class DataError(PMCNetError, ValueError):
    """Malformed or incompatible input data."""

    exit_code = 4


class NumericalError(PMCNetError, ArithmeticError):
    """A non-finite quantity appeared where a finite one is required."""

    exit_code = 5


class DegeneracyError(PMCNetError, RuntimeError):
    """Importance weights collapsed (all zero) so no estimate can be formed."""

    exit_code = 6
