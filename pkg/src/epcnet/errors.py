"""Exception types shared across the package."""


class CapacityError(ValueError):
    """Problem size exceeds an enumeration guard (e.g. 2^K search)."""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``history`` carries whatever validation history was recorded before
    the divergence, when available.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""
