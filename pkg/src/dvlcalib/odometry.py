"""Dead-reckoned DVL odometry and trajectory error metrics.

Position is integrated between consecutive orientation samples using the
time-weighted pair of DVL velocities bracketing the interval; the rotation
term (R(T1) - R(T2)) t compensates the lever-arm sweep. ATE aligns the
tracks rigidly (rotation + translation, no scale, since the velocity scale
is itself under test); RPE differences relative displacements over a fixed
horizon.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientOverlap, MissingBracket
from .types import CalibrationParams

log = logging.getLogger(__name__)

ASSOCIATION_TOL = 0.05  # s, half the nominal 10 Hz period


@dataclass(frozen=True)
class OdometryTrack:
    timestamps: np.ndarray
    positions: np.ndarray  # (T, 3), world frame

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        ps = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if ts.size != ps.shape[0]:
            raise ValueError("timestamps and positions must align")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", ps)

    def __len__(self):
        return self.timestamps.size


@dataclass(frozen=True)
class OrientationTrack:
    timestamps: np.ndarray
    rotations: np.ndarray  # (T, 3, 3), world from base

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        rs = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        if ts.size != rs.shape[0]:
            raise ValueError("timestamps and rotations must align")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "rotations", rs)


@dataclass(frozen=True)
class TrajectoryErrors:
    ate: float
    rpe: float
    horizon: float
    n_associations: int


def dvl_dead_reckon(dvl_log, orientation: OrientationTrack,
                    params: CalibrationParams) -> OdometryTrack:
    """Integrate DVL velocities between orientation samples.

    Per interval [T1, T2]: pick DVL samples d1, d2 with shifted stamps
    s1 <= T1 and s2 in (T1, T2]; average v = ((s2-T1) v1 + (T2-s2) v2)/(T2-T1);
    update p += kappa^{-1} R(T1) R_db v dT + (R(T1) - R(T2)) t. Intervals
    without a bracketing pair are skipped with a warning.
    """
    stamps = np.array([m.timestamp for m in dvl_log]) + params.clock_offset
    vels = np.stack([m.velocity for m in dvl_log])
    r_bd = params.rotation.matrix.T  # base from DVL
    lever = params.lever_arm
    inv_kappa = 1.0 / params.scale

    times = orientation.timestamps
    rots = orientation.rotations
    positions = [np.zeros(3)]
    out_times = [times[0]]
    skipped = 0
    pos = np.zeros(3)
    started = False
    for k in range(times.size - 1):
        t1, t2 = times[k], times[k + 1]
        i2 = int(np.searchsorted(stamps, t1 + 1e-12))
        ok = (i2 < stamps.size and stamps[i2] <= t2 + 1e-12 and i2 >= 1
              and stamps[i2 - 1] <= t1 + 1e-12)
        if not ok:
            if started:
                skipped += 1
                out_times.append(t2)
                positions.append(pos.copy())
            else:
                out_times = [t2]
            continue
        if not started:
            started = True
            out_times = [t1]
            positions = [pos.copy()]
        s2 = stamps[i2]
        dt = t2 - t1
        v_d = ((s2 - t1) * vels[i2 - 1] + (t2 - s2) * vels[i2]) / dt
        pos = pos + inv_kappa * (rots[k] @ (r_bd @ v_d)) * dt \
            + (rots[k] - rots[k + 1]) @ lever
        out_times.append(t2)
        positions.append(pos.copy())

    if not started:
        raise MissingBracket(
            "no DVL sample pair brackets any orientation interval; check the "
            "clock offset and time spans")
    if skipped:
        warnings.warn(f"{skipped} dead-reckoning intervals had no DVL bracket "
                      "and were skipped", stacklevel=2)
    return OdometryTrack(np.array(out_times), np.stack(positions))


def _associate(est: OdometryTrack, ref: OdometryTrack, tol: float):
    """Nearest-neighbor timestamp association within `tol` seconds."""
    idx_pairs = []
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(ref.timestamps, t))
        best, best_dt = None, tol
        for jj in (j - 1, j):
            if 0 <= jj < ref.timestamps.size:
                dt = abs(ref.timestamps[jj] - t)
                if dt <= best_dt:
                    best, best_dt = jj, dt
        if best is not None:
            idx_pairs.append((i, best))
    return idx_pairs


def rigid_align(source: np.ndarray, target: np.ndarray):
    """Closed-form rigid registration (rotation + translation) of point sets."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    h = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = mu_t - rot @ mu_s
    return rot, trans


def compute_ate(estimate: OdometryTrack, reference: OdometryTrack,
                association_tol: float = ASSOCIATION_TOL) -> float:
    """RMSE of associated positions after optimal rigid alignment."""
    pairs = _associate(estimate, reference, association_tol)
    if len(pairs) < 3:
        raise InsufficientOverlap(
            f"only {len(pairs)} associated timestamps (need >= 3)")
    src = estimate.positions[[i for i, _ in pairs]]
    dst = reference.positions[[j for _, j in pairs]]
    rot, trans = rigid_align(src, dst)
    resid = dst - (src @ rot.T + trans)
    return float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def compute_rpe(estimate: OdometryTrack, reference: OdometryTrack,
                horizon: float = 1.0,
                association_tol: float = ASSOCIATION_TOL) -> float:
    """RMSE of relative-displacement mismatches over the given horizon."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    pairs = _associate(estimate, reference, association_tol)
    if len(pairs) < 3:
        raise InsufficientOverlap(
            f"only {len(pairs)} associated timestamps (need >= 3)")
    times = np.array([estimate.timestamps[i] for i, _ in pairs])
    p_est = estimate.positions[[i for i, _ in pairs]]
    p_ref = reference.positions[[j for _, j in pairs]]
    period = np.mean(np.diff(times)) if times.size > 1 else horizon
    tol = 0.5 * period
    errs = []
    for k, t in enumerate(times):
        lo = int(np.searchsorted(times, t + horizon - tol))
        hi = int(np.searchsorted(times, t + horizon + tol, side="right"))
        for j in range(lo, hi):
            d_est = p_est[j] - p_est[k]
            d_ref = p_ref[j] - p_ref[k]
            errs.append(np.sum((d_est - d_ref) ** 2))
    if not errs:
        raise InsufficientOverlap("no sample pairs separated by the horizon")
    return float(np.sqrt(np.mean(errs)))


def evaluate_tracks(estimate: OdometryTrack, reference: OdometryTrack,
                    horizon: float = 1.0,
                    association_tol: float = ASSOCIATION_TOL) -> TrajectoryErrors:
    pairs = _associate(estimate, reference, association_tol)
    return TrajectoryErrors(
        ate=compute_ate(estimate, reference, association_tol),
        rpe=compute_rpe(estimate, reference, horizon, association_tol),
        horizon=horizon,
        n_associations=len(pairs),
    )
