"""Exception types shared across the package."""


class VoxrepError(Exception):
    """Base class for all package errors."""


class ContractError(VoxrepError):
    """An operation was called with arguments violating its contract."""


class ConfigError(VoxrepError):
    """Invalid or inconsistent configuration."""


class FormatError(VoxrepError):
    """Malformed on-disk data. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(VoxrepError):
    """Patch pair sampling could not produce a valid pair."""


class GenerationError(VoxrepError):
    """Phantom generation failed (for example organ placement exhausted retries)."""


class DataError(VoxrepError):
    """Dataset contents violate expectations (for example out-of-range class ids)."""


class TrainingError(VoxrepError):
    """Training aborted, typically on a non-finite loss."""
