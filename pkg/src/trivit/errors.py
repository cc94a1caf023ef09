"""Exception hierarchy shared across the package."""


class TriVitError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(TriVitError, ValueError):
    """Operands have incompatible extents. The message names both shapes."""


class ContractError(TriVitError, ValueError):
    """A caller violated an operation's precondition (empty batch, non-scalar
    loss, missing validation metrics, ...)."""


class ConfigError(TriVitError, ValueError):
    """Invalid or unknown configuration value. Mapped to CLI exit code 2."""


class VolumeFormatError(TriVitError, RuntimeError):
    """Volume file could not be loaded: missing file, header/payload
    mismatch, or non-finite payload values."""


class DegenerateVolumeError(TriVitError, ValueError):
    """Normalization target has fewer than two voxels or zero variance."""


class UndefinedCorrelationError(TriVitError, ValueError):
    """Rank correlation is undefined (all-equal vector, n < 2). Raised rather
    than silently returning 0 so degenerate evaluations stay visible."""


class TrainingError(TriVitError, RuntimeError):
    """Training produced a non-finite gradient or parameter. The message
    names the offending parameter."""
