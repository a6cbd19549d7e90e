"""Exception types shared across the package."""


class ConflocError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ConflocError):
    """Invalid or inconsistent configuration values."""


class GeometryError(ConflocError):
    """Source/microphone placement violates the room geometry."""


class InputError(ConflocError):
    """Malformed input data (shape mismatches, too-short signals, ...)."""


class DegenerateBinsError(InputError):
    """Auto-PSD below the numerical floor at one or more frequency bins."""

    def __init__(self, bins, message=None):
        self.bins = list(bins)
        super().__init__(message or f"degenerate auto-PSD at bins {self.bins}")


class DegenerateManifoldError(ConflocError):
    """All pairwise feature distances vanish; no kernel scale can be set."""


class IllConditionedKernelError(ConflocError):
    """SPD factorization of a kernel matrix failed even after jitter."""
