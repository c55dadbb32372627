"""White-noise-on-jerk motion prior: kernel type and Gram-block assembly.

The compiled `_speedups` extension is used when available; set the
environment variable DVLCALIB_NO_EXT=1 to force the pure-numpy fallback
(`dvlcalib.wnoj.BACKEND` reports which one is active).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _wnoj_numpy

if os.environ.get("DVLCALIB_NO_EXT"):
    _impl = _wnoj_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _speedups as _impl  # type: ignore

        BACKEND = "cython"
    except ImportError:
        _impl = _wnoj_numpy
        BACKEND = "numpy"


DEFAULT_START_VAR = 1e6


@dataclass(frozen=True)
class WnojKernel:
    """Per-axis white-noise-on-jerk prior.

    output_scale: jerk power spectral density per axis (the paper-style
        diag([500, 500, 500, 5, 5, 5]) values are interpreted as PSDs).
    start_var: initial covariance per chain channel at the kernel start
        time (large-but-finite stand-in for a diffuse start).
    start_time: absolute start of the process; None means "infer from the
        earliest evaluation time", which makes results invariant under a
        common time shift of all inputs.
    mean_fn: optional prior mean, t -> (3, n_axes) array of
        [values; rates; accelerations]; None means zero.
    switches: optional piecewise PSD changes as (time, psd-per-axis)
        pairs applying from that time onward (e.g. the two-phase
        excitation profile used by the simulation studies).
    """

    output_scale: np.ndarray
    start_var: float = DEFAULT_START_VAR
    start_time: Optional[float] = None
    mean_fn: Optional[Callable[[float], np.ndarray]] = None
    switches: Sequence[tuple] = field(default_factory=tuple)

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.output_scale, dtype=float))
        if np.any(scale <= 0.0) or not np.all(np.isfinite(scale)):
            raise ValueError("output_scale entries must be positive and finite")
        if self.start_var < 0.0:
            raise ValueError("start_var must be non-negative")
        switches = tuple(
            (float(t), np.asarray(psd, dtype=float).reshape(scale.shape))
            for t, psd in self.switches
        )
        if any(np.any(psd <= 0.0) for _, psd in switches):
            raise ValueError("switch PSD entries must be positive")
        if list(t for t, _ in switches) != sorted(t for t, _ in switches):
            raise ValueError("switch times must be ascending")
        object.__setattr__(self, "output_scale", scale)
        object.__setattr__(self, "switches", switches)

    @property
    def n_axes(self) -> int:
        return self.output_scale.size

    def segments(self, t0: float):
        """Segment start times and per-axis PSDs covering [t0, inf)."""
        starts = [t0]
        psds = [self.output_scale]
        for t, psd in self.switches:
            starts.append(t)
            psds.append(psd)
        return np.asarray(starts, dtype=float), np.stack(psds)

    def resolve_t0(self, *time_arrays) -> float:
        if self.start_time is not None:
            return float(self.start_time)
        return float(min(np.min(t) for t in time_arrays if np.size(t)))

    def mean(self, times) -> np.ndarray:
        """Prior mean at the given times, shape (len(times), 3, n_axes)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if self.mean_fn is None:
            return np.zeros((times.size, 3, self.n_axes))
        return np.stack([np.asarray(self.mean_fn(t), dtype=float) for t in times])


def channel_block(times_a, chan_a, times_b, chan_b, kernel: WnojKernel, axis: int):
    """Single-axis covariance between chain channel `chan_a` at `times_a`
    and `chan_b` at `times_b` (channels: 0 value, 1 rate, 2 acceleration)."""
    times_a = np.atleast_1d(np.asarray(times_a, dtype=float))
    times_b = np.atleast_1d(np.asarray(times_b, dtype=float))
    t0 = kernel.resolve_t0(times_a, times_b)
    starts, psds = kernel.segments(t0)
    return _impl.wnoj_channel_block(
        times_a, chan_a, times_b, chan_b, starts, psds[:, axis], t0, kernel.start_var
    )


def axis_gram(times_a, times_b, kernel: WnojKernel, axis: int) -> np.ndarray:
    """Full 3-channel chain Gram for one axis, time-major: row 3*i + channel."""
    times_a = np.atleast_1d(np.asarray(times_a, dtype=float))
    times_b = np.atleast_1d(np.asarray(times_b, dtype=float))
    out = np.empty((3 * times_a.size, 3 * times_b.size))
    for da in range(3):
        for db in range(3):
            out[da::3, db::3] = channel_block(times_a, da, times_b, db, kernel, axis)
    return out


def kernel_block(times_a, times_b, kernel: WnojKernel) -> np.ndarray:
    """Gram matrix between stacked states at two time sets.

    Rows/columns are time-major with the per-time stacking
    [values(n_axes), rates(n_axes), accelerations(n_axes)], matching the
    MotionState layout. Axes are independent, so each per-time block is
    diagonal across axes.
    """
    times_a = np.atleast_1d(np.asarray(times_a, dtype=float))
    times_b = np.atleast_1d(np.asarray(times_b, dtype=float))
    n = kernel.n_axes
    out = np.zeros((3 * n * times_a.size, 3 * n * times_b.size))
    for axis in range(n):
        for da in range(3):
            for db in range(3):
                block = channel_block(times_a, da, times_b, db, kernel, axis)
                out[da * n + axis :: 3 * n, db * n + axis :: 3 * n] = block
    return out


def same_time_cov(times, kernel: WnojKernel, axis: int) -> np.ndarray:
    """Per-time 3x3 chain covariance K(t, t), vectorized; shape (T, 3, 3)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    t0 = kernel.resolve_t0(times)
    tau = times - t0
    if np.any(tau < -1e-12):
        raise ValueError("evaluation times precede the kernel start time")
    out = np.zeros((times.size, 3, 3))
    p0 = kernel.start_var
    if p0 != 0.0:
        t2 = tau * tau
        out[:, 0, 0] = p0 * (1.0 + t2 + 0.25 * t2 * t2)
        out[:, 0, 1] = out[:, 1, 0] = p0 * (tau + 0.5 * t2 * tau)
        out[:, 0, 2] = out[:, 2, 0] = p0 * 0.5 * t2
        out[:, 1, 1] = p0 * (1.0 + t2)
        out[:, 1, 2] = out[:, 2, 1] = p0 * tau
        out[:, 2, 2] = p0
    starts, psds = kernel.segments(t0)
    starts = starts - t0
    for s in range(starts.size):
        q = psds[s, axis]
        lo = max(starts[s], 0.0)
        hi = starts[s + 1] if s + 1 < starts.size else np.inf
        c = np.clip(np.minimum(hi, tau) - lo, 0.0, None)
        x = tau - lo
        for da in range(3):
            for db in range(da, 3):
                val = q * _wnoj_numpy._f_entry(da, db, x, x, c)
                out[:, da, db] += val
                if db != da:
                    out[:, db, da] += val
    return out


def chain_transition(dt: float) -> np.ndarray:
    """Constant-jerk transition of the [value, rate, acceleration] chain."""
    return np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])


def chain_process_cov(dt: float, psd: float) -> np.ndarray:
    """Process-noise covariance of one chain over a step of length dt."""
    d2, d3, d4, d5 = dt * dt, dt**3, dt**4, dt**5
    return psd * np.array(
        [
            [d5 / 20.0, d4 / 8.0, d3 / 6.0],
            [d4 / 8.0, d3 / 3.0, d2 / 2.0],
            [d3 / 6.0, d2 / 2.0, dt],
        ]
    )


def step_cov(t1: float, t2: float, kernel: WnojKernel, axis: int) -> np.ndarray:
    """Process covariance of one chain over [t1, t2], composing across PSD
    segments when the step straddles a switch."""
    if t2 < t1:
        raise ValueError("t2 must not precede t1")
    starts, psds = kernel.segments(kernel.resolve_t0(np.array([t1])))
    bounds = list(starts[1:]) + [np.inf]
    cov = np.zeros((3, 3))
    for s in range(starts.size):
        lo = max(t1, starts[s])
        hi = min(t2, bounds[s])
        if hi > lo:
            phi = chain_transition(hi - lo)
            cov = phi @ cov @ phi.T + chain_process_cov(hi - lo, psds[s, axis])
    return cov
