"""Exception hierarchy shared across the calibration pipeline."""


class CalibrationError(Exception):
    """Base class for every error raised by this package."""


class AngleNearPiError(CalibrationError):
    """SE(3) logarithm requested for a rotation too close to pi radians."""


class OutOfRangeError(CalibrationError):
    """Query time outside the supported interpolation interval."""


class PcdParseError(CalibrationError):
    """Malformed PCD header or payload."""


class PcdIoError(CalibrationError):
    """Filesystem-level failure while reading or writing a PCD file."""


class TooFewPointsError(CalibrationError):
    """Operation needs more points than the cloud provides."""


class EmptyTrajectoryError(CalibrationError):
    """Keyframe selection on an empty trajectory."""


class MissingPerPointTimeError(CalibrationError):
    """Motion compensation requires per-point timestamps."""


class UnconstrainedVariableError(CalibrationError):
    """A free variable block is not touched by any factor."""


class NumericalFailureError(CalibrationError):
    """Non-finite cost or Jacobian encountered during optimization."""


class NonFiniteObjectiveError(CalibrationError):
    """Derivative-free search hit a non-finite objective value."""


class InsufficientMotionError(CalibrationError):
    """Trajectory lacks the rotation needed for rotation initialization."""


class DivergedSolveError(CalibrationError):
    """Outer calibration loop increased its per-residual cost."""


class NoGroundFoundError(CalibrationError):
    """Ground plane extraction failed its inlier or tilt gates."""


class DegenerateGeometryError(CalibrationError):
    """Normal equations are numerically singular for the given scene."""


class NoValidPatchError(CalibrationError):
    """Terrain analysis found no patch with enough ground points."""


class NoEvaluablePointsError(CalibrationError):
    """Map metric skipped every point of the input cloud."""


class IncompleteStagesError(CalibrationError):
    """Joint graph assembly requires all prior stage outputs."""


class ConfigError(CalibrationError):
    """Invalid pipeline configuration."""


class DatasetError(CalibrationError):
    """Dataset directory is missing files or malformed."""
