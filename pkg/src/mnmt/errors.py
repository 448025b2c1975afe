"""Exception types shared across the package."""


class UsageError(ValueError):
    """A caller violated an operation's precondition."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Tensor directory disagrees with the config's shape table."""


class CheckpointTruncatedError(CheckpointError):
    """Payload shorter (or longer) than the directory requires."""


class NonFiniteGradientError(RuntimeError):
    """An optimizer step saw a NaN or infinite gradient."""
