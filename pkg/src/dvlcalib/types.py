"""Frame-aware domain types shared by the whole pipeline.

Conventions: SI units (meters, seconds, radians) throughout. Orientation is
carried as a rotation vector in the 6-dof state; proper rotation matrices are
used for the sensor extrinsic and for world-frame evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotAntisymmetric

ORTHOGONALITY_TOL = 1e-9


def skew(a) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: skew(a) @ b == cross(a, b)."""
    a = np.asarray(a, dtype=float)
    return np.array(
        [
            [0.0, -a[2], a[1]],
            [a[2], 0.0, -a[0]],
            [-a[1], a[0], 0.0],
        ]
    )


def unskew(m, rel_tol: float = 1e-3) -> np.ndarray:
    """Extract the 3-vector from (the antisymmetric part of) a 3x3 matrix.

    Raises NotAntisymmetric when the symmetric contamination exceeds
    `rel_tol` relative to the matrix norm.
    """
    m = np.asarray(m, dtype=float)
    norm = np.linalg.norm(m)
    if norm > 0 and np.linalg.norm(m + m.T) / norm > rel_tol:
        raise NotAntisymmetric(
            f"matrix is not antisymmetric: |M + M^T| / |M| = "
            f"{np.linalg.norm(m + m.T) / norm:.3e}"
        )
    anti = 0.5 * (m - m.T)
    return np.array([anti[2, 1], anti[0, 2], anti[1, 0]])


def rotation_matrix_from_rotvec(rho) -> np.ndarray:
    """Rodrigues map: rotation vector -> 3x3 rotation matrix."""
    rho = np.asarray(rho, dtype=float)
    angle = np.linalg.norm(rho)
    k = skew(rho)
    if angle < 1e-10:
        # second-order series keeps the map smooth through zero
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * k
        + ((1.0 - np.cos(angle)) / angle**2) * (k @ k)
    )


def rotvec_from_rotation_matrix(mat) -> np.ndarray:
    """Inverse Rodrigues map (principal branch, |rho| <= pi)."""
    mat = np.asarray(mat, dtype=float)
    cos_angle = np.clip((np.trace(mat) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis_raw = np.array(
        [mat[2, 1] - mat[1, 2], mat[0, 2] - mat[2, 0], mat[1, 0] - mat[0, 1]]
    )
    if angle < 1e-7:
        return 0.5 * axis_raw
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; use the diagonal form
        outer = (mat + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(outer), 0.0, None))
        k = int(np.argmax(axis))
        axis = outer[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        if np.dot(axis, axis_raw) < 0:
            axis = -axis
        return angle * axis
    return (angle / (2.0 * np.sin(angle))) * axis_raw


@dataclass(frozen=True)
class Rotation3:
    """A proper rotation matrix, validated on construction."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {mat.shape}")
        if np.linalg.norm(mat.T @ mat - np.eye(3)) > ORTHOGONALITY_TOL:
            raise ValueError("matrix is not orthogonal within 1e-9")
        if abs(np.linalg.det(mat) - 1.0) > ORTHOGONALITY_TOL:
            raise ValueError("matrix determinant is not +1 within 1e-9")
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls(np.eye(3))

    @classmethod
    def from_rotvec(cls, rho) -> "Rotation3":
        return cls(rotation_matrix_from_rotvec(rho))

    def as_rotvec(self) -> np.ndarray:
        return rotvec_from_rotation_matrix(self.matrix)

    def inverse(self) -> "Rotation3":
        return Rotation3(self.matrix.T)

    def angle_to(self, other: "Rotation3") -> float:
        """Geodesic angle between two rotations, radians."""
        return float(np.linalg.norm(rotvec_from_rotation_matrix(self.matrix.T @ other.matrix)))

    def __matmul__(self, other):
        if isinstance(other, Rotation3):
            return Rotation3(self.matrix @ other.matrix)
        return self.matrix @ np.asarray(other)


def rotation_from_rotvec(rho) -> Rotation3:
    """Rotation vector (axis * angle, radians) -> validated Rotation3."""
    return Rotation3.from_rotvec(rho)


@dataclass(frozen=True)
class CalibrationParams:
    """Calibration unknowns: DVL-from-base rotation, lever arm, velocity
    scale and clock offset (base stamp minus DVL stamp of one event)."""

    rotation: Rotation3
    lever_arm: np.ndarray
    scale: float = 1.0
    clock_offset: float = 0.0

    def __post_init__(self):
        lever = np.asarray(self.lever_arm, dtype=float).reshape(3)
        if not np.all(np.isfinite(lever)):
            raise ValueError("lever arm must be finite")
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.isfinite(self.clock_offset):
            raise ValueError("clock offset must be finite")
        object.__setattr__(self, "lever_arm", lever)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "clock_offset", float(self.clock_offset))

    @classmethod
    def identity(cls) -> "CalibrationParams":
        return cls(Rotation3.identity(), np.zeros(3), 1.0, 0.0)


@dataclass(frozen=True)
class MotionState:
    """6-dof state at one timestamp: pose [p; theta], velocity [v; omega]
    and acceleration, each a 6-vector (linear first, angular second)."""

    timestamp: float
    pose6: np.ndarray
    vel6: np.ndarray
    acc6: np.ndarray

    def __post_init__(self):
        for name in ("pose6", "vel6", "acc6"):
            vec = np.asarray(getattr(self, name), dtype=float).reshape(6)
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, vec)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def linear_velocity(self) -> np.ndarray:
        return self.vel6[:3]

    @property
    def angular_velocity(self) -> np.ndarray:
        return self.vel6[3:]


def _check_spd(cov, size, name):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {cov.shape}")
    if np.linalg.norm(cov - cov.T) > 1e-9 * max(1.0, np.linalg.norm(cov)):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(cov).min() <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    return cov


@dataclass(frozen=True)
class DvlMeasurement:
    """One DVL velocity sample on the DVL clock."""

    timestamp: float
    velocity: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        vel = np.asarray(self.velocity, dtype=float).reshape(3)
        if not np.all(np.isfinite(vel)):
            raise ValueError("velocity must be finite")
        object.__setattr__(self, "velocity", vel)
        object.__setattr__(self, "noise_cov", _check_spd(self.noise_cov, 3, "noise_cov"))
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class BaseMeasurement:
    """One base-sensor observation (pose or twist channels) on the base clock."""

    timestamp: float
    observed: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float).reshape(6)
        if not np.all(np.isfinite(obs)):
            raise ValueError("observed must be finite")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "noise_cov", _check_spd(self.noise_cov, 6, "noise_cov"))
        object.__setattr__(self, "timestamp", float(self.timestamp))
