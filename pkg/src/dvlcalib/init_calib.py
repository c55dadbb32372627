"""Sequential initialization of the calibration variables.

Order of operations: pick the low-angular-velocity subset, line-search the
clock offset and scale on debiased speed-norm matching, stack all DVL
measurements against the interpolated states, solve the linear system with
bias elimination, then peel scale / rotation / lever arm out of the 6x3
solution block.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import wnoj
from .dvl_model import excitation_score
from .errors import DegenerateZ1, EmptySet, FlatObjective, NonPositiveGram, RankDeficient
from .gp import GpModel, GpPosterior, interpolate_dvl, regress_base
from .types import CalibrationParams, DvlMeasurement, MotionState, Rotation3, skew, unskew

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
MIN_LOW_ROTATION = 30


@dataclass(frozen=True)
class LowRotationSet:
    """Indices of DVL measurements taken at near-zero angular velocity."""

    indices: np.ndarray
    omega_threshold: float

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=int))

    def __len__(self):
        return self.indices.size


def select_low_rotation(states: Sequence[MotionState], threshold: float) -> LowRotationSet:
    """All indices whose angular-velocity norm is below `threshold` [rad/s]."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    norms = np.array([np.linalg.norm(s.vel6[3:]) for s in states])
    idx = np.nonzero(norms < threshold)[0]
    if idx.size == 0:
        raise EmptySet(
            f"no state has |omega| < {threshold} rad/s (min is {norms.min():.3g})")
    if idx.size < MIN_LOW_ROTATION:
        warnings.warn(
            f"only {idx.size} low-rotation samples; clock/scale estimates may be poor",
            stacklevel=2,
        )
    return LowRotationSet(indices=idx, omega_threshold=float(threshold))


@dataclass(frozen=True)
class GridSpec:
    """Search grid for the clock-offset / scale line search."""

    delta_max: float = 0.5
    delta_step: float = 1e-3
    kappa_min: float = 0.95
    kappa_max: float = 1.05
    kappa_step: float = 0.005
    refine_tol: float = 1e-5  # golden-section stop width on delta, seconds

    def deltas(self) -> np.ndarray:
        n = int(round(self.delta_max / self.delta_step))
        return np.arange(-n, n + 1) * self.delta_step

    def kappas(self) -> np.ndarray:
        n = int(round((self.kappa_max - self.kappa_min) / self.kappa_step))
        return self.kappa_min + np.arange(n + 1) * self.kappa_step


def _interp_linear_velocity(posterior: GpPosterior, model: GpModel, delta: float,
                            indices: np.ndarray) -> np.ndarray:
    """Interpolated linear velocity at the selected DVL times + delta."""
    q = model.dvl_times[indices] + delta
    out = model.prior_mean(q)[:, 1, :3].copy()
    for a in range(3):
        out[:, a] += model.cross_obs(q, 1, a) @ posterior.beta[:, a]
    return out


def _debias_terms(dvl_meas, indices):
    """Per-sample |v_meas|^2 - tr(Q) (the kappa^2-scaled side of the match)."""
    a = np.empty(indices.size)
    for k, i in enumerate(indices):
        a[k] = float(dvl_meas[i].velocity @ dvl_meas[i].velocity) - float(
            np.trace(dvl_meas[i].noise_cov))
    return a


def clock_scale_objective(delta: float, kappa: float, posterior: GpPosterior,
                          model: GpModel, dvl_meas: Sequence[DvlMeasurement],
                          lowrot: LowRotationSet) -> float:
    """Debiased squared-speed mismatch summed over the low-rotation subset:
    sum_i ((|v_meas|^2 - tr(Q)) / kappa^2 - (|v_hat(delta)|^2 - tr(Sigma_v)))^2.
    """
    if abs(delta) > model.delta_max + 1e-12:
        raise ValueError("delta outside the search window")
    idx = lowrot.indices
    vhat = _interp_linear_velocity(posterior, model, delta, idx)
    trv = model.linear_velvar_trace(delta)[idx]
    a = _debias_terms(dvl_meas, idx)
    b = np.einsum("ij,ij->i", vhat, vhat) - trv
    resid = a / kappa**2 - b
    return float(resid @ resid)


def _golden_min(f, lo, hi, tol):
    """Deterministic golden-section minimizer on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


def estimate_clock_and_scale(posterior: GpPosterior, model: GpModel,
                             dvl_meas: Sequence[DvlMeasurement],
                             lowrot: LowRotationSet,
                             search: GridSpec = GridSpec()):
    """Grid search over (delta, kappa) followed by golden-section refinement
    of delta and one closed-form coordinate pass on kappa.

    Returns (delta_hat, kappa_hat, profile) where profile rows are
    (delta, best kappa at that delta, objective).
    """
    idx = lowrot.indices
    deltas = search.deltas()
    if deltas.size < 3:
        raise ValueError("delta grid needs at least 3 points")
    kappas = search.kappas()
    u_grid = 1.0 / kappas**2
    a = _debias_terms(dvl_meas, idx)

    profile = np.empty((deltas.size, 3))
    best = (np.inf, 0.0, 1.0)
    for r, delta in enumerate(deltas):
        vhat = _interp_linear_velocity(posterior, model, delta, idx)
        b = np.einsum("ij,ij->i", vhat, vhat) - model.linear_velvar_trace(delta)[idx]
        resid = np.outer(u_grid, a) - b[None, :]
        vals = np.einsum("ki,ki->k", resid, resid)
        kbest = int(np.argmin(vals))
        profile[r] = (delta, kappas[kbest], vals[kbest])
        if vals[kbest] < best[0]:
            best = (vals[kbest], delta, kappas[kbest])

    objs = profile[:, 2]
    med = float(np.median(objs))
    if med == 0.0 or float(objs.min()) / med > 0.99:
        raise FlatObjective(
            "line-search profile is flat (min/median > 0.99); the trajectory "
            "carries no usable speed variation for clock-offset estimation")

    _, delta_star, kappa_star = best
    u_star = 1.0 / kappa_star**2

    def refine_objective(delta):
        # exact interpolated mean; variance term interpolated between the two
        # nearest grid offsets (already cached; its delta variation is far
        # below the noise floor of the matched quantity)
        vhat = _interp_linear_velocity(posterior, model, delta, idx)
        pos = int(np.clip(np.searchsorted(deltas, delta), 1, deltas.size - 1))
        dlo, dhi = deltas[pos - 1], deltas[pos]
        w = 0.0 if dhi == dlo else (delta - dlo) / (dhi - dlo)
        trv = (1.0 - w) * model.linear_velvar_trace(float(dlo))[idx] \
            + w * model.linear_velvar_trace(float(dhi))[idx]
        b = np.einsum("ij,ij->i", vhat, vhat) - trv
        resid = a * u_star - b
        return float(resid @ resid)

    lo = max(delta_star - search.delta_step, -search.delta_max)
    hi = min(delta_star + search.delta_step, search.delta_max)
    delta_hat = _golden_min(refine_objective, lo, hi, search.refine_tol)

    # one exact coordinate pass on kappa at the refined delta:
    # sum_i (a_i u - b_i)^2 is quadratic in u = 1/kappa^2
    vhat = _interp_linear_velocity(posterior, model, delta_hat, idx)
    b = np.einsum("ij,ij->i", vhat, vhat) - model.linear_velvar_trace(delta_hat)[idx]
    denom = float(a @ a)
    u_opt = float(a @ b) / denom if denom > 0 else u_star
    if u_opt > 0:
        kappa_hat = float(np.clip(1.0 / np.sqrt(u_opt), search.kappa_min, search.kappa_max))
    else:
        kappa_hat = kappa_star
    return float(delta_hat), kappa_hat, profile


@dataclass(frozen=True)
class StackedRegressor:
    """All-measurement linear system: rows [v_hat, -omega_hat] against the
    raw DVL velocities, plus the summed state-uncertainty Gram G used for
    bias elimination."""

    h_hat: np.ndarray   # (N, 6)
    v_meas: np.ndarray  # (N, 3)
    g: np.ndarray       # (6, 6)


def stack_regressor(states: Sequence[MotionState], vel_covs: np.ndarray,
                    dvl_meas: Sequence[DvlMeasurement]) -> StackedRegressor:
    """Build the stacked regressor from interpolated states and their 6x6
    velocity covariance blocks."""
    n = len(states)
    if len(dvl_meas) != n or vel_covs.shape != (n, 6, 6):
        raise ValueError("states, velocity covariances and measurements must align")
    h = np.empty((n, 6))
    v = np.empty((n, 3))
    for i, (s, m) in enumerate(zip(states, dvl_meas)):
        h[i, :3] = s.vel6[:3]
        h[i, 3:] = -s.vel6[3:]
        v[i] = m.velocity
    sign = np.diag([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
    g = sign @ vel_covs.sum(axis=0) @ sign
    return StackedRegressor(h_hat=h, v_meas=v, g=0.5 * (g + g.T))


def _solve_gram(gram, rhs, n):
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise RankDeficient(
            f"stacked regressor Gram has condition number {cond:.3g}; the lever "
            "arm is unobservable from this motion - recalibrate with richer "
            "angular-velocity excitation")
    return np.linalg.solve(gram / n, rhs / n)


def solve_Z_raw(reg: StackedRegressor) -> np.ndarray:
    """Unconstrained least-squares solution of V = H Z (no bias correction)."""
    n = reg.h_hat.shape[0]
    gram = reg.h_hat.T @ reg.h_hat
    return _solve_gram(gram, reg.h_hat.T @ reg.v_meas, n)


def solve_Z_corrected(reg: StackedRegressor, fallback: bool = True) -> np.ndarray:
    """Bias-eliminated solution ((H^T H - G)/N)^{-1} (H^T V/N).

    When the corrected Gram loses positive definiteness (over-correction at
    small N) the raw solution is returned with a warning, unless
    fallback=False in which case NonPositiveGram is raised.
    """
    n = reg.h_hat.shape[0]
    gram = reg.h_hat.T @ reg.h_hat - reg.g
    if np.linalg.eigvalsh(0.5 * (gram + gram.T)).min() < 0.0:
        if not fallback:
            raise NonPositiveGram(
                "bias-corrected Gram has a negative eigenvalue (over-correction "
                "at small sample size)")
        warnings.warn(
            "bias-corrected Gram is not positive definite; falling back to the "
            "uncorrected estimate", stacklevel=2)
        return solve_Z_raw(reg)
    return _solve_gram(gram, reg.h_hat.T @ reg.v_meas, n)


def recover_structured(z: np.ndarray, clock_offset: float = 0.0) -> CalibrationParams:
    """Peel (scale, rotation, lever arm) out of the stacked 6x3 solution.

    The solution satisfies Z = [ (kappa R)^T ; (kappa R t^)^T ], so the top
    block determines kappa and R, and the lever arm comes from the
    antisymmetric part of R^T Z2 / kappa.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (6, 3):
        raise ValueError("Z must be 6x3")
    z1 = z[:3].T
    z2 = z[3:].T
    det1 = float(np.linalg.det(z1))
    if abs(det1) <= 1e-9:
        raise DegenerateZ1(f"det(Z1) = {det1:.3g} is too small to extract a rotation")
    kappa = abs(det1) ** (1.0 / 3.0)
    u, _, vt = np.linalg.svd(z1 / kappa)
    rot_mat = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    rotation = Rotation3(rot_mat)
    b = rot_mat.T @ z2 / kappa
    lever = unskew(0.5 * (b - b.T))
    return CalibrationParams(rotation=rotation, lever_arm=lever, scale=kappa,
                             clock_offset=float(clock_offset))


def lever_symmetric_ratio(z: np.ndarray) -> float:
    """|sym part| / |antisym part| of R^T Z2 / kappa: pure estimation error,
    tracked as a diagnostic of the structured recovery."""
    z1 = z[:3].T
    kappa = abs(float(np.linalg.det(z1))) ** (1.0 / 3.0)
    u, _, vt = np.linalg.svd(z1 / kappa)
    rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    b = rot.T @ z[3:].T / kappa
    sym = 0.5 * np.linalg.norm(b + b.T)
    anti = 0.5 * np.linalg.norm(b - b.T)
    return float(sym / anti) if anti > 0 else np.inf


@dataclass(frozen=True)
class InitConfig:
    omega_threshold: float = 0.02
    search: GridSpec = field(default_factory=GridSpec)
    bias_correction: bool = True


@dataclass(frozen=True)
class InitEstimate:
    params: CalibrationParams
    z_raw: np.ndarray
    z_corrected: Optional[np.ndarray]
    diagnostics: dict


def initialize(model: GpModel, base_meas, dvl_meas,
               config: InitConfig = InitConfig()) -> InitEstimate:
    """Full sequential initialization on one data set."""
    posterior = regress_base(model, base_meas)
    states0, _ = interpolate_dvl(posterior, model, 0.0)
    lowrot = select_low_rotation(states0, config.omega_threshold)
    delta, kappa_ls, profile = estimate_clock_and_scale(
        posterior, model, dvl_meas, lowrot, config.search)

    states, vel_covs = interpolate_dvl(posterior, model, delta)
    reg = stack_regressor(states, vel_covs, dvl_meas)
    z_raw = solve_Z_raw(reg)
    z_corrected = None
    fell_back = False
    if config.bias_correction:
        try:
            z_corrected = solve_Z_corrected(reg, fallback=False)
            z_used = z_corrected
        except NonPositiveGram:
            log.warning("bias correction over-corrected; using the raw estimate")
            fell_back = True
            z_used = z_raw
    else:
        z_used = z_raw
    params = recover_structured(z_used, delta)

    gram = reg.h_hat.T @ reg.h_hat
    diagnostics = {
        "n_low_rotation": len(lowrot),
        "kappa_linesearch": kappa_ls,
        "profile": profile,
        "gram_condition": float(np.linalg.cond(gram)),
        "excitation_score": excitation_score(states),
        "extrapolated_queries": model.count_extrapolated(delta),
        "bias_correction": bool(config.bias_correction and not fell_back),
        "bias_fallback_raw": fell_back,
        "lever_symmetric_ratio": lever_symmetric_ratio(z_used),
    }
    return InitEstimate(params=params, z_raw=z_raw, z_corrected=z_corrected,
                        diagnostics=diagnostics)
