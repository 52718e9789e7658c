"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data errors
exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """Bad flags, malformed config files, inconsistent options."""


class DataError(ValueError):
    """Unreadable or inconsistent volumes, landmarks, checkpoints."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (poisoned loss)."""
