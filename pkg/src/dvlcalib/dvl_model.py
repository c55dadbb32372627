"""DVL observation model: prediction, residuals and analytic Jacobians.

The measurement is kappa * R * (v + omega x t) in the DVL frame. Rotation
Jacobians use the right perturbation R * exp(phi^), so phi lives in the
DVL frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .types import CalibrationParams, DvlMeasurement, MotionState, skew


def predict_dvl(state: MotionState, params: CalibrationParams) -> np.ndarray:
    """Noise-free DVL velocity for a state and calibration parameters."""
    v = state.vel6[:3]
    omega = state.vel6[3:]
    return params.scale * (
        params.rotation.matrix @ (v + np.cross(omega, params.lever_arm))
    )


@dataclass(frozen=True)
class DvlResidual:
    """Residual v_meas - prediction with its information matrix and the
    Jacobian blocks of the residual w.r.t. each calibration variable and
    the velocity state."""

    value: np.ndarray          # (3,)
    weight: np.ndarray         # (3,3) = Q_d^{-1}
    wrt_rotation: np.ndarray   # (3,3), right perturbation R exp(phi^)
    wrt_lever_arm: np.ndarray  # (3,3)
    wrt_scale: np.ndarray      # (3,1)
    wrt_vel6: np.ndarray       # (3,6)


def residual_and_jacobians(meas: DvlMeasurement, state: MotionState,
                           params: CalibrationParams) -> DvlResidual:
    v = state.vel6[:3]
    omega = state.vel6[3:]
    t = params.lever_arm
    kappa = params.scale
    rot = params.rotation.matrix

    u = v + np.cross(omega, t)
    prediction = kappa * (rot @ u)
    value = meas.velocity - prediction

    kr = kappa * rot
    wrt_rotation = kr @ skew(u)       # d(-R exp(phi^) u)/dphi = +kappa R u^
    wrt_lever_arm = -kr @ skew(omega)
    wrt_scale = -(rot @ u).reshape(3, 1)
    wrt_vel6 = np.hstack([-kr, kr @ skew(t)])

    return DvlResidual(
        value=value,
        weight=np.linalg.inv(meas.noise_cov),
        wrt_rotation=wrt_rotation,
        wrt_lever_arm=wrt_lever_arm,
        wrt_scale=wrt_scale,
        wrt_vel6=wrt_vel6,
    )


def excitation_score(states: Sequence[MotionState]) -> float:
    """Lever-arm identifiability diagnostic: the smallest singular value of
    the stacked [V_b, -Omega_b] regressor, scaled by 1/sqrt(N). Zero means
    the lever arm (or rotation/scale) is unobservable from this motion."""
    if len(states) == 0:
        raise ValueError("excitation_score needs at least one state")
    h = np.empty((len(states), 6))
    for i, s in enumerate(states):
        h[i, :3] = s.vel6[:3]
        h[i, 3:] = -s.vel6[3:]
    svals = np.linalg.svd(h, compute_uv=False)
    smin = svals[-1] if len(states) >= 6 else 0.0
    return float(smin / np.sqrt(len(states)))
