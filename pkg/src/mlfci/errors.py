"""Exception types shared across the library and mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid or unknown configuration (CLI exit code 2)."""


class DataError(Exception):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class NumericalError(Exception):
    """Numerical failure: singular system, non-convergence, non-finite result
    (CLI exit code 4)."""
