"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes or dims violate an operation's contract."""


class ManifestError(ValueError):
    """Dataset manifest is malformed or references an unknown class."""


class ConfigError(ValueError):
    """Training config file is malformed or carries unknown keys."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, or from a mismatched architecture."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or an empty split)."""
