"""Exception hierarchy shared across the package."""


class PatchFMError(Exception):
    """Base class for all package errors."""


class ShapeError(PatchFMError):
    """Tensor shapes are inconsistent with the requested operation."""


class NumericError(PatchFMError):
    """A numeric invariant was violated (division by zero, NaN/Inf, ...)."""


class MaskError(PatchFMError):
    """A mask left no valid positions for the requested operation."""


class DataError(PatchFMError):
    """Input data is malformed or insufficient."""


class GenError(PatchFMError):
    """Synthetic data generation failed after bounded retries."""


class FormatError(PatchFMError):
    """A serialized artifact (checkpoint, ...) is corrupt or unsupported."""


class ConfigError(PatchFMError):
    """A configuration value is invalid or inconsistent."""


class DataWarning(UserWarning):
    """Recoverable data condition handled by a documented fallback."""
