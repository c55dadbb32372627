"""GP motion-prior machinery: batch regression on base measurements,
clock-offset-shifted interpolation of DVL-time states, and joint smoothing
that also conditions on DVL velocity measurements.

All conditioning is done in observation space: with B1 = R + H K1 H^T,

    mean(f)   = mu_f + Cov(f, obs) B1^{-1} (y - H mu)
    cov(f, g) = K(f, g) - Cov(f, obs) B1^{-1} Cov(obs, g)

which is algebraically identical to the dense-state forms
K1 H^T (R + H K1 H^T)^{-1} / K4 - K3 K1^{-1} (K1 - Sigma_b) K1^{-1} K2
but never factorizes the 3M x 3M chain Gram. Axes are independent under the
prior, so everything runs per axis when the measurement noise is
axis-diagonal; cross-axis noise switches the factorization to the joint
observed space (correct but meant for small problems).
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import wnoj
from .errors import SingularGram
from .types import BaseMeasurement, CalibrationParams, DvlMeasurement, MotionState, skew

log = logging.getLogger(__name__)

OBS_CHANNEL = {"pose": 0, "twist": 1}
JITTER_REL = 1e-9


def _chol(mat, what):
    """Cholesky with one jitter retry, raising SingularGram on failure."""
    try:
        return cho_factor(mat, lower=True)
    except LinAlgError:
        jitter = JITTER_REL * float(np.mean(np.diag(mat)))
        try:
            return cho_factor(mat + jitter * np.eye(mat.shape[0]), lower=True)
        except LinAlgError as exc:
            raise SingularGram(f"{what} is numerically singular beyond jitter repair") from exc


def states_to_array(states: Sequence[MotionState]) -> np.ndarray:
    """Stack MotionStates into a (T, 3, 6) array of [pose; vel; acc] rows."""
    out = np.empty((len(states), 3, 6))
    for i, s in enumerate(states):
        out[i, 0] = s.pose6
        out[i, 1] = s.vel6
        out[i, 2] = s.acc6
    return out


def array_to_states(times, arr) -> list:
    return [
        MotionState(timestamp=t, pose6=arr[i, 0], vel6=arr[i, 1], acc6=arr[i, 2])
        for i, t in enumerate(np.asarray(times, dtype=float))
    ]


class GpModel:
    """Immutable regression setup: kernel, timestamp sets, observation
    selector and base noise, with cached factorizations and cached
    data-independent query operators (shared across Monte Carlo trials).

    observe: which state channel the base sensor reports, "pose" (default,
    absolute pose observations) or "twist" (direct velocity observations).
    """

    def __init__(self, kernel: wnoj.WnojKernel, base_times, dvl_times, base_noise,
                 observe: str = "pose", delta_max: float = 0.5):
        if kernel.n_axes != 6:
            raise ValueError("GpModel requires a 6-axis kernel")
        self.base_times = np.asarray(base_times, dtype=float).reshape(-1)
        self.dvl_times = np.asarray(dvl_times, dtype=float).reshape(-1)
        if self.base_times.size < 1:
            raise ValueError("at least one base timestamp required")
        for name, t in (("base_times", self.base_times), ("dvl_times", self.dvl_times)):
            if t.size > 1 and np.any(np.diff(t) <= 0.0):
                raise ValueError(f"{name} must be strictly increasing")
        if observe not in OBS_CHANNEL:
            raise ValueError(f"observe must be one of {sorted(OBS_CHANNEL)}")
        self.observe = observe
        self.obs_channel = OBS_CHANNEL[observe]
        self.delta_max = float(delta_max)

        lo_candidates = [self.base_times[0]]
        if self.dvl_times.size:
            lo_candidates.append(self.dvl_times[0] - self.delta_max)
        t0 = kernel.start_time if kernel.start_time is not None else min(lo_candidates)
        if t0 > min(lo_candidates) + 1e-12:
            raise ValueError("kernel start time is later than the earliest query time")
        self.kernel = wnoj.WnojKernel(
            output_scale=kernel.output_scale,
            start_var=kernel.start_var,
            start_time=t0,
            mean_fn=kernel.mean_fn,
            switches=kernel.switches,
        )

        m = self.base_times.size
        noise = np.asarray(base_noise, dtype=float)
        if noise.ndim == 1 and noise.size == 6:
            noise = np.tile(np.diag(noise), (m, 1, 1))
        elif noise.shape == (6, 6):
            noise = np.tile(noise, (m, 1, 1))
        if noise.shape != (m, 6, 6):
            raise ValueError("base_noise must be (M,6,6), (6,6) or a 6-vector of variances")
        self.base_noise = noise
        off = noise - noise * np.eye(6)
        self.axis_diagonal = not np.any(off)

        # stage-1 observed-space factor, per axis or joint
        self._obs_gram = [
            wnoj.channel_block(self.base_times, self.obs_channel,
                               self.base_times, self.obs_channel, self.kernel, a)
            for a in range(6)
        ]
        if self.axis_diagonal:
            self._b1 = [
                _chol(self._obs_gram[a] + np.diag(self.base_noise[:, a, a]),
                      "R + H K1 H^T")
                for a in range(6)
            ]
        else:
            big = np.zeros((6 * m, 6 * m))
            for a in range(6):
                big[a::6, a::6] = self._obs_gram[a]
            for j in range(m):
                big[6 * j : 6 * j + 6, 6 * j : 6 * j + 6] += self.base_noise[j]
            self._b1 = _chol(big, "R + H K1 H^T")

        self._k1_chol = {}
        self._cross_cache = OrderedDict()
        self._velcov_cache = OrderedDict()
        self._velvar_cache = {}
        self._knot_chain_obs = None

    # -- basic helpers ------------------------------------------------------

    @property
    def n_base(self) -> int:
        return self.base_times.size

    @property
    def n_dvl(self) -> int:
        return self.dvl_times.size

    def prior_mean(self, times) -> np.ndarray:
        return self.kernel.mean(times)

    def prior_mean_obs(self, times) -> np.ndarray:
        return self.prior_mean(times)[:, self.obs_channel, :]

    def cross_obs(self, times, chan, axis) -> np.ndarray:
        """Cov(chain channel at `times`, observed channel at base knots)."""
        return wnoj.channel_block(times, chan, self.base_times, self.obs_channel,
                                  self.kernel, axis)

    def obs_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply B1^{-1} to full observation-space vectors.

        rhs is (M, 6) or (M, 6, K): dimension 1 is the observed channel slot,
        each trailing column is one complete observation-space vector.
        """
        if self.axis_diagonal:
            out = np.empty_like(rhs)
            for a in range(6):
                out[:, a] = cho_solve(self._b1[a], rhs[:, a])
            return out
        flat = rhs.reshape(6 * self.n_base, -1)
        out = cho_solve(self._b1, flat)
        return out.reshape(rhs.shape)

    def axis_obs_solve(self, axis: int, rhs: np.ndarray) -> np.ndarray:
        """Apply B1^{-1} to vectors supported on one axis slot only and
        return the same-axis component; rhs is (M,) or (M, K)."""
        if self.axis_diagonal:
            return cho_solve(self._b1[axis], rhs)
        full = np.zeros((self.n_base, 6) + rhs.shape[1:])
        full[:, axis] = rhs
        return self.obs_solve(full)[:, axis]

    def k1_chol(self, axis):
        """Jittered Cholesky of the per-axis chain Gram at the base knots."""
        if axis not in self._k1_chol:
            k1 = wnoj.axis_gram(self.base_times, self.base_times, self.kernel, axis)
            k1 = k1 + JITTER_REL * float(np.mean(np.diag(k1))) * np.eye(k1.shape[0])
            self._k1_chol[axis] = _chol(k1, "K1")
        return self._k1_chol[axis]

    def count_extrapolated(self, delta: float) -> int:
        q = self.dvl_times + delta
        return int(np.sum((q < self.base_times[0]) | (q > self.base_times[-1])))

    # -- pairwise posterior corrections -------------------------------------

    def _pair_corr_pairs(self, u_left, u_right) -> np.ndarray:
        """Correction Cov(f_a, obs) B1^{-1} Cov(obs, g_b) at equal query
        indices; u_left[a] and u_right[a] are (T, M). Returns (T, 6, 6)."""
        t = u_left[0].shape[0]
        corr = np.zeros((t, 6, 6))
        if self.axis_diagonal:
            for a in range(6):
                s = cho_solve(self._b1[a], u_right[a].T)
                corr[:, a, a] = np.einsum("ij,ji->i", u_left[a], s)
        else:
            for a in range(6):
                rhs = np.zeros((self.n_base, 6, t))
                rhs[:, a, :] = u_left[a].T
                w = self.obs_solve(rhs)
                for b in range(6):
                    corr[:, a, b] = np.einsum("ij,ji->i", u_right[b], w[:, b, :])
        return corr

    def _pair_corr(self, u_by_axis) -> np.ndarray:
        return self._pair_corr_pairs(u_by_axis, u_by_axis)

    # -- cached query-side operators -----------------------------------------

    def cross_operators(self, delta: float):
        """Cross-covariance blocks Cov(chain(q), obs) at q = dvl_times+delta,
        as blocks[axis][channel] of shape (N, M). LRU-cached (2 offsets)."""
        key = float(delta)
        if key in self._cross_cache:
            self._cross_cache.move_to_end(key)
            return self._cross_cache[key]
        q = self.dvl_times + key
        blocks = [[self.cross_obs(q, d, a) for d in range(3)] for a in range(6)]
        self._cross_cache[key] = blocks
        if len(self._cross_cache) > 2:
            self._cross_cache.popitem(last=False)
        return blocks

    def velcov_at(self, delta: float) -> np.ndarray:
        """Posterior (given base obs only) vel6 covariance blocks at
        dvl_times + delta, (N, 6, 6). LRU-cached (2 offsets)."""
        key = float(delta)
        if key in self._velcov_cache:
            self._velcov_cache.move_to_end(key)
            return self._velcov_cache[key]
        q = self.dvl_times + key
        blocks = self.cross_operators(key)
        cov = -self._pair_corr([blocks[a][1] for a in range(6)])
        for a in range(6):
            cov[:, a, a] += wnoj.same_time_cov(q, self.kernel, a)[:, 1, 1]
        cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        self._velcov_cache[key] = cov
        if len(self._velcov_cache) > 2:
            self._velcov_cache.popitem(last=False)
        return cov

    def linear_velvar_trace(self, delta: float) -> np.ndarray:
        """tr of the linear-velocity posterior covariance at dvl_times+delta
        (data independent; cached per offset for line-search reuse)."""
        key = float(delta)
        if key not in self._velvar_cache:
            q = self.dvl_times + key
            if self.axis_diagonal:
                tot = np.zeros(q.size)
                for a in range(3):
                    u = self.cross_obs(q, 1, a)
                    s = cho_solve(self._b1[a], u.T)
                    tot += wnoj.same_time_cov(q, self.kernel, a)[:, 1, 1]
                    tot -= np.einsum("ij,ji->i", u, s)
            else:
                tot = np.trace(self.velcov_at(key)[:, :3, :3], axis1=1, axis2=2)
            self._velvar_cache[key] = tot
        return self._velvar_cache[key]

    def knot_chain_obs(self):
        """Cov(chain at knots, obs), blocks[axis][channel] (M, M); cached."""
        if self._knot_chain_obs is None:
            self._knot_chain_obs = [
                [self.cross_obs(self.base_times, d, a) for d in range(3)]
                for a in range(6)
            ]
        return self._knot_chain_obs


class GpPosterior:
    """Posterior over base-knot states given the base measurements.

    Carries the observed-space dual vector (the cached solve factor reused by
    every interpolation); state means and covariances materialize lazily.
    """

    def __init__(self, model: GpModel, beta: np.ndarray, resid_obs: np.ndarray):
        self.model = model
        self.beta = beta
        self.resid_obs = resid_obs
        self._knot_means = None
        self._knot_cov = None

    @property
    def base_quadform(self) -> float:
        """Minimized prior + base-measurement cost (observation-space form)."""
        return float(np.sum(self.resid_obs * self.beta))

    @property
    def knot_means(self) -> np.ndarray:
        if self._knot_means is None:
            m = self.model
            out = m.prior_mean(m.base_times).copy()
            blocks = m.knot_chain_obs()
            for a in range(6):
                for d in range(3):
                    out[:, d, a] += blocks[a][d] @ self.beta[:, a]
            self._knot_means = out
        return self._knot_means

    @property
    def base_states(self) -> list:
        return array_to_states(self.model.base_times, self.knot_means)

    @property
    def knot_cov_blocks(self) -> np.ndarray:
        """Per-knot 18x18 posterior covariance; row index 6*channel + axis."""
        if self._knot_cov is None:
            m = self.model
            blocks = m.knot_chain_obs()
            t = m.n_base
            cov = np.zeros((t, 18, 18))
            for da in range(3):
                for db in range(da, 3):
                    corr = m._pair_corr_pairs(
                        [blocks[a][da] for a in range(6)],
                        [blocks[a][db] for a in range(6)],
                    )
                    cov[:, 6 * da : 6 * da + 6, 6 * db : 6 * db + 6] -= corr
                    if db != da:
                        cov[:, 6 * db : 6 * db + 6, 6 * da : 6 * da + 6] -= (
                            np.transpose(corr, (0, 2, 1))
                        )
            for a in range(6):
                prior = wnoj.same_time_cov(m.base_times, m.kernel, a)
                for da in range(3):
                    for db in range(3):
                        cov[:, 6 * da + a, 6 * db + a] += prior[:, da, db]
            self._knot_cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        return self._knot_cov

    def cov_axis(self, axis: int) -> np.ndarray:
        """Full (3M x 3M) posterior covariance of one axis chain (test scale)."""
        m = self.model
        u = np.empty((3 * m.n_base, m.n_base))
        for d in range(3):
            u[d::3, :] = m.cross_obs(m.base_times, d, axis)
        w = m.axis_obs_solve(axis, u.T)
        prior = wnoj.axis_gram(m.base_times, m.base_times, m.kernel, axis)
        post = prior - u @ w
        return 0.5 * (post + post.T)


def regress_base(model: GpModel, base_meas: Sequence[BaseMeasurement]) -> GpPosterior:
    """Batch GP regression of the base-knot states on the base measurements."""
    if len(base_meas) != model.n_base:
        raise ValueError(f"expected {model.n_base} base measurements, got {len(base_meas)}")
    stamps = np.array([m.timestamp for m in base_meas])
    if not np.allclose(stamps, model.base_times, atol=1e-9):
        raise ValueError("base measurement timestamps do not match the model")
    observed = np.stack([m.observed for m in base_meas])
    resid = observed - model.prior_mean_obs(model.base_times)
    beta = model.obs_solve(resid)
    return GpPosterior(model, beta, resid)


def interpolate_dvl(posterior: GpPosterior, model: GpModel, clock_offset: float):
    """States at dvl_times + clock_offset (base clock) and their 6x6
    velocity covariance blocks."""
    if abs(clock_offset) > model.delta_max + 1e-12:
        raise ValueError(
            f"clock offset {clock_offset} outside the search window +-{model.delta_max}")
    blocks = model.cross_operators(clock_offset)
    q = model.dvl_times + clock_offset
    means = model.prior_mean(q).copy()
    for a in range(6):
        for d in range(3):
            means[:, d, a] += blocks[a][d] @ posterior.beta[:, a]
    return array_to_states(q, means), model.velcov_at(clock_offset).copy()


def dvl_observation_matrix(params: CalibrationParams) -> np.ndarray:
    """Linear map vel6 -> predicted DVL velocity: [kappa R, -kappa R t^]."""
    kr = params.scale * params.rotation.matrix
    return np.hstack([kr, -kr @ skew(params.lever_arm)])


class JointPosterior:
    """Posterior over base-knot and DVL-time states given base measurements
    and (state-linear) DVL measurements at fixed calibration parameters.

    `objective` is the minimized value of the full MAP cost at these
    parameters (prior + base + DVL terms, states re-optimized)."""

    def __init__(self, model, params, stage1, base_means, dvl_means, m1vel,
                 gamma, zeta1, g_axis, p1vel, b2_chol, objective):
        self.model = model
        self.params = params
        self.stage1 = stage1
        self.base_means = base_means      # (M,3,6)
        self.dvl_means = dvl_means        # (N,3,6) at dvl_times + delta
        self.stage1_vel = m1vel           # (N,6) DVL-blind interpolation
        self.gamma = gamma                # (N,3) DVL-block dual
        self.zeta1 = zeta1                # (M,6) base-block dual
        self._g_axis = g_axis             # (N,6) gamma contracted with A columns
        self._p1vel = p1vel
        self._b2_chol = b2_chol
        self.objective = objective
        self._dvl_cov = None

    @property
    def query_times(self) -> np.ndarray:
        return self.model.dvl_times + self.params.clock_offset

    @property
    def base_states(self) -> list:
        return array_to_states(self.model.base_times, self.base_means)

    @property
    def dvl_states(self) -> list:
        return array_to_states(self.query_times, self.dvl_means)

    @property
    def dvl_vel6(self) -> np.ndarray:
        return self.dvl_means[:, 1, :]

    def vel6_at(self, times) -> np.ndarray:
        """Smoothed velocity channels at arbitrary times, (T, 6)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        m = self.model
        out = m.prior_mean(times)[:, 1, :].copy()
        q = self.query_times
        for a in range(6):
            out[:, a] += m.cross_obs(times, 1, a) @ self.zeta1[:, a]
            if q.size:
                out[:, a] += (
                    wnoj.channel_block(times, 1, q, 1, m.kernel, a) @ self._g_axis[:, a]
                )
        return out

    @property
    def dvl_vel6_cov(self) -> np.ndarray:
        """Smoothed per-state 6x6 velocity covariance at the DVL queries."""
        if self._dvl_cov is None:
            model = self.model
            n = model.n_dvl
            a_mat = dvl_observation_matrix(self.params)
            if model.axis_diagonal:
                p1 = np.stack(self._p1vel)  # (6,N,N)
                stage1 = np.zeros((n, 6, 6))
                for a in range(6):
                    stage1[:, a, a] = np.diagonal(p1[a])
                cross = np.einsum("bij,kb->ijkb", p1, a_mat)
            else:
                stage1 = np.transpose(
                    np.diagonal(self._p1vel, axis1=2, axis2=3), (2, 0, 1))
                cross = np.einsum("abji,ka->ijkb", self._p1vel, a_mat)
            flat = cross.reshape(n, 3 * n, 6)
            rhs = flat.transpose(1, 0, 2).reshape(3 * n, 6 * n)
            sol = cho_solve(self._b2_chol, rhs).reshape(3 * n, n, 6)
            corr = np.einsum("ira,rib->iab", flat, sol)
            cov = stage1 - corr
            self._dvl_cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        return self._dvl_cov


def smooth_all(model: GpModel, base_meas, dvl_meas: Sequence[DvlMeasurement],
               params: CalibrationParams) -> JointPosterior:
    """One exact conditioning pass on base and DVL measurements with fixed
    calibration parameters (the DVL model is linear in the state, so a
    single Gauss-Newton pass solves the state block exactly)."""
    stage1 = regress_base(model, base_meas)
    delta = params.clock_offset
    q = model.dvl_times + delta
    n, m = q.size, model.n_base
    if len(dvl_meas) != n:
        raise ValueError(f"expected {n} DVL measurements, got {len(dvl_meas)}")

    a_mat = dvl_observation_matrix(params)
    blocks = model.cross_operators(delta)
    uvel = [blocks[a][1] for a in range(6)]

    m1vel = model.prior_mean(q)[:, 1, :].copy() if n else np.zeros((0, 6))
    for a in range(6):
        if n:
            m1vel[:, a] += uvel[a] @ stage1.beta[:, a]

    if n == 0:
        return JointPosterior(model, params, stage1, stage1.knot_means.copy(),
                              np.zeros((0, 3, 6)), m1vel, np.zeros((0, 3)),
                              stage1.beta.copy(), np.zeros((0, 6)), None, None,
                              stage1.base_quadform)

    k11q = [wnoj.channel_block(q, 1, q, 1, model.kernel, a) for a in range(6)]
    if model.axis_diagonal:
        p1vel = [
            k11q[a] - uvel[a] @ cho_solve(model._b1[a], uvel[a].T) for a in range(6)
        ]
        b2 = np.einsum("aij,ka,la->ikjl", np.stack(p1vel), a_mat, a_mat)
    else:
        w_by_axis = []
        for a in range(6):
            rhs = np.zeros((m, 6, n))
            rhs[:, a, :] = uvel[a].T
            w_by_axis.append(model.obs_solve(rhs))
        p1vel = np.empty((6, 6, n, n))
        for a in range(6):
            for b in range(6):
                p1vel[a, b] = -uvel[a] @ w_by_axis[b][:, a, :]
            p1vel[a, a] += k11q[a]
        b2 = np.einsum("abij,ka,lb->ikjl", p1vel, a_mat, a_mat)
    b2 = b2.reshape(3 * n, 3 * n)
    for i, meas in enumerate(dvl_meas):
        b2[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] += meas.noise_cov
    b2_chol = _chol(b2, "DVL innovation covariance")

    v_meas = np.stack([meas.velocity for meas in dvl_meas])
    r2 = v_meas - m1vel @ a_mat.T
    gamma = cho_solve(b2_chol, r2.reshape(-1)).reshape(n, 3)

    g_axis = gamma @ a_mat  # (N, 6)
    c12g = np.empty((m, 6))
    for a in range(6):
        c12g[:, a] = uvel[a].T @ g_axis[:, a]
    zeta1 = stage1.beta - model.obs_solve(c12g)

    knot_blocks = model.knot_chain_obs()
    base_means = model.prior_mean(model.base_times).copy()
    dvl_means = model.prior_mean(q).copy()
    for a in range(6):
        base_vel_cross = wnoj.channel_block(model.base_times, 1, q, 1, model.kernel, a)
        for d in range(3):
            if d == 1:
                cross_bq = base_vel_cross
                cross_qq = k11q[a]
            else:
                cross_bq = wnoj.channel_block(model.base_times, d, q, 1, model.kernel, a)
                cross_qq = wnoj.channel_block(q, d, q, 1, model.kernel, a)
            base_means[:, d, a] += knot_blocks[a][d] @ zeta1[:, a] + cross_bq @ g_axis[:, a]
            dvl_means[:, d, a] += blocks[a][d] @ zeta1[:, a] + cross_qq @ g_axis[:, a]

    objective = stage1.base_quadform + float(r2.reshape(-1) @ gamma.reshape(-1))
    return JointPosterior(model, params, stage1, base_means, dvl_means, m1vel,
                          gamma, zeta1, g_axis, p1vel, b2_chol, objective)
