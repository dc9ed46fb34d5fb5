"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures with 3 and resource-cap violations with 4.
"""


class ConfigError(ValueError):
    """A run configuration is inconsistent or cannot be parsed."""


class NumericalError(RuntimeError):
    """A numerical operation failed (singular solve, NaN state, ...)."""


class CapExceeded(RuntimeError):
    """A configured size or memory cap was exceeded."""
