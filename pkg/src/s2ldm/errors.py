"""Exception types raised across the package."""


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite; the training run must stop."""


class CorruptCheckpointError(ValueError):
    """An S2T1 container failed validation. ``field`` names the failing part."""

    def __init__(self, field, message):
        super().__init__(f"corrupt checkpoint ({field}): {message}")
        self.field = field


class UnsupportedVersionError(CorruptCheckpointError):
    pass


class UndefinedMetricError(ValueError):
    """Normalized metric requested against an all-zero target."""
