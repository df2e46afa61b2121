"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, broken invariant)."""


class NumericalError(RuntimeError):
    """Training produced a non-finite quantity and was aborted."""


class CheckpointError(IOError):
    """Checkpoint bytes are malformed; the message includes a byte offset."""
