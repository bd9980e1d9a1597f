"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
dataset problems exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DataError(ValueError):
    """A dataset file or derived view violates the format contract."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or failed a numeric check."""
