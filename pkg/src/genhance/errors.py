"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (bad sizes, mismatched vocab, ...)."""


class FrozenParameterError(RuntimeError):
    """An operation attempted to update parameters of a frozen model."""


class CheckpointError(RuntimeError):
    """Checkpoint container could not be read or written."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version does not match this code."""


class IncompatibleCheckpointError(CheckpointError):
    """Two checkpoints disagree on structural settings (vocab size, stride, ...)."""


class DivergenceError(RuntimeError):
    """Training loss diverged; carries the path of the diagnostic state dump."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class MaskGenerationError(RuntimeError):
    """Blockwise mask growth could not reach the target ratio in bounded iterations."""
