"""Exception types shared across the package."""


class MonofuseError(Exception):
    """Base class for all package errors."""


class InvalidDepthError(MonofuseError):
    """Back-projection requested for a non-positive depth."""


class BehindCameraError(MonofuseError):
    """Projection requested for a point with z <= 0."""


class ImageSizeError(MonofuseError):
    """Image too small for the requested pyramid depth."""


class TrackingLostError(MonofuseError):
    """Sparse initializer found too few inlier matches."""


class DegenerateRefinementError(MonofuseError):
    """Dense refinement had too few associations or a non-finite cost."""


class GraphTooSmallError(MonofuseError):
    """Deformation graph has fewer nodes than required connectivity."""


class OptimizationFailedError(MonofuseError):
    """Graph optimization diverged or left constraints unsatisfied."""


class NoConstraintsError(MonofuseError):
    """Loop closure produced no surface constraints."""


class NoPlaneError(MonofuseError):
    """Ground plane fit found too few inliers."""


class DegenerateScaleError(MonofuseError):
    """Scale estimate is undefined for the given inputs."""


class DepthFormatError(MonofuseError):
    """Depth file could not be parsed or has the wrong dimensions."""


class NotEvaluableError(MonofuseError):
    """Trajectory too short (or degenerate) for the requested metric."""


class AlignmentDegenerateError(MonofuseError):
    """Too few or collinear points for a unique rigid alignment."""


class SceneGenerationError(MonofuseError):
    """Synthetic scene specification cannot be rendered."""


class MonotonicityError(MonofuseError):
    """Map time advanced backwards."""


class ConfigError(MonofuseError):
    """Configuration file or override is invalid."""
