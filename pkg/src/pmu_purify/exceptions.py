"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class PurifyError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(PurifyError, ValueError):
    """Invalid configuration, hyperparameters or shapes."""

    exit_code = 2


class MissingArtifactError(PurifyError, FileNotFoundError):
    """A required upstream artifact (dataset, checkpoint, ...) is absent."""

    exit_code = 3


class UsageError(PurifyError, RuntimeError):
    """API misuse, e.g. a backward pass with a stale activation cache."""


class TrainingError(PurifyError, RuntimeError):
    """Training diverged (non-finite loss)."""


class LoadError(PurifyError, OSError):
    """A persisted artifact is malformed or truncated."""
