"""Exception types raised across the calibration pipeline."""


class CalibrationError(Exception):
    """Base class for all calibration-specific failures."""


class NotAntisymmetric(CalibrationError):
    """Matrix handed to unskew() is too far from antisymmetric."""


class SingularGram(CalibrationError):
    """A kernel Gram system is numerically singular beyond jitter repair."""


class EmptySet(CalibrationError):
    """No DVL measurement qualifies for the low-rotation subset."""


class FlatObjective(CalibrationError):
    """Clock/scale line-search profile carries no temporal signal."""


class RankDeficient(CalibrationError):
    """Stacked regressor is rank deficient (insufficient excitation)."""


class NonPositiveGram(CalibrationError):
    """Bias-corrected Gram lost positive definiteness (over-correction)."""


class DegenerateZ1(CalibrationError):
    """Rotation block of the stacked solution has a near-zero determinant."""


class MissingBracket(CalibrationError):
    """No DVL sample pair brackets any dead-reckoning interval."""


class InsufficientOverlap(CalibrationError):
    """Too few associated timestamps between two trajectories."""
