"""Exception types shared across the package.

The CLI maps each of these onto a distinct exit code.
"""


class UlegrayError(Exception):
    """Base class for package errors."""


class ConfigError(UlegrayError, ValueError):
    """Invalid or unknown configuration key/value."""


class DatasetError(UlegrayError):
    """A dataset source is missing, corrupt or inconsistent."""


class MissingArtifactError(UlegrayError, FileNotFoundError):
    """An expected bank, checkpoint or run record is not on disk."""


class IntegrityError(UlegrayError):
    """Content hash of a stored artifact does not match its manifest."""


class SchemaVersionError(UlegrayError):
    """Stored artifact has a schema version this code does not understand."""


class InvariantError(UlegrayError, ValueError):
    """A domain invariant (budget, gray closure, shape...) is violated."""


class DivergenceError(UlegrayError, RuntimeError):
    """Training produced a non-finite loss.

    ``record`` holds the run record truncated to the last good epoch.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
