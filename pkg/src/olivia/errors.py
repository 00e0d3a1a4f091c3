class ValidationError(ValueError):
    """Invalid input shape, value, or configuration."""


class DegenerateSpectrumError(ValidationError):
    """An aggregate spectrum with zero total energy cannot be normalized."""


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""
