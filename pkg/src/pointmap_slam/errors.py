"""Exception types shared across the package."""


class SlamError(Exception):
    """Base class for all package-specific errors."""


class InvalidPointError(SlamError):
    """Point is unusable (near-zero norm for ray normalization)."""


class BehindCameraError(SlamError):
    """Point is behind the camera plane; projection undefined."""


class SingularInnovationError(SlamError):
    """EKF innovation matrix is not invertible; skip the point."""


class DegenerateSystemError(SlamError):
    """Residual system has no spare degrees of freedom (M <= rank)."""


class DegenerateWindowError(SlamError):
    """A window pair has too few correspondences to optimize."""


class NoProgressError(SlamError):
    """Damping overflowed without a single accepted optimizer step."""


class DisconnectedGraphError(SlamError):
    """Pose graph normal equations are singular (disconnected component)."""


class DatasetError(SlamError):
    """Replay dataset is missing files or contains malformed records."""


class EvaluationError(SlamError):
    """Trajectory evaluation is impossible (too few associations)."""
