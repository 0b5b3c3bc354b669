"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(ValueError):
    """A configuration value is outside its documented domain."""


class InputError(ValueError):
    """User-supplied data violates a precondition."""


class ContractError(RuntimeError):
    """An API was called in a way its contract forbids."""


class CorpusFormatError(ValueError):
    """A corpus file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed or has the wrong version."""


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite during training."""
