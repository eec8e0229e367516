"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
dataset/file problems exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """A configuration value is out of range or internally inconsistent."""


class DataError(ValueError):
    """An input file, dataset record, or annotation is missing or malformed."""


class NumericalError(ArithmeticError):
    """A non-finite value surfaced where the pipeline requires finite math."""
