"""Exception types shared across the package."""


class CloudLocError(Exception):
    """Base class for all cloudloc errors."""


class ConfigError(CloudLocError):
    """Invalid configuration file or option value."""


class ParseError(CloudLocError):
    """Malformed input file (bad header, element count mismatch, truncation)."""


class MissingProperty(ParseError):
    """Required property absent from an input file (e.g. PLY without xyz)."""


class UnsupportedFormat(CloudLocError):
    """File format recognized but not supported."""


class ImageTooSmall(CloudLocError):
    """Image below the minimum size for scale-space detection."""


class SupportOutOfBounds(CloudLocError):
    """Descriptor support falls mostly outside the image."""


class InsufficientNeighborhood(CloudLocError):
    """Too few points in a local neighborhood for a stable estimate."""


class DegenerateProjection(CloudLocError):
    """Point lies on the camera's principal plane (|depth| ~ 0)."""


class DegenerateConfiguration(CloudLocError):
    """Geometric configuration unusable for a minimal solver (e.g. collinear)."""


class NoRealSolution(CloudLocError):
    """Minimal solver produced no real, physically valid solution."""


class InsufficientCorrespondences(CloudLocError):
    """Fewer correspondences than the estimator's minimum."""


class NoHypothesisFound(CloudLocError):
    """Every robust-estimation sample was degenerate."""


class RefinementDiverged(CloudLocError):
    """Nonlinear refinement failed to decrease the cost."""


class DegenerateData(CloudLocError):
    """Training data contains a single class."""


class DimensionMismatch(CloudLocError):
    """Feature vector length does not match the model."""


class PoolExhausted(CloudLocError):
    """Rejection sampling could not produce enough valid samples."""


class EmptyDataset(CloudLocError):
    """Dataset generation produced zero positive pairs."""


class EmptySet(CloudLocError):
    """Statistic requested over an empty collection."""


class LocalizationFailed(CloudLocError):
    """End-to-end localization failed; wraps the failing stage's error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"localization failed at stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
