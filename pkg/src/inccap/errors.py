"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class ConfigurationError(ValueError):
    """A run, strategy or generator was configured inconsistently."""


class AnnotationError(ValueError):
    """An annotation file could not be parsed or failed validation."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class CheckpointError(RuntimeError):
    """A checkpoint could not be written, read, or does not match its vocabulary."""
