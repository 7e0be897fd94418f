"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""


class NumericsError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class DataError(ValueError):
    """Dataset directory or image file cannot be used."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated or incompatible."""
