"""Exception types shared across the package."""


class IncganError(Exception):
    pass


class ConfigError(IncganError):
    """Bad configuration: wrong shapes, out-of-range values, unknown keys."""


class UsageError(IncganError):
    """An operation was called in a state where it is not defined."""


class FormatError(IncganError):
    """A file on disk does not follow the container format."""


class TrainingError(IncganError):
    """Non-finite values appeared while training."""
