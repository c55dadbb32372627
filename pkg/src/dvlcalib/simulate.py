"""Synthetic trajectory and measurement generation for the desk-scale
simulation studies.

Trajectories are forward samples of the per-axis white-noise-on-jerk chain
with a piecewise PSD (two halves), starting from a zero state. DVL
measurements are taken at DVL-clock stamps i/rate whose physical (base
clock) instants are stamp + clock_offset; base pose measurements observe the
six pose channels with independent Gaussian noise. Trajectory, DVL noise and
base noise use independent RNG streams spawned from the scenario seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from . import wnoj
from .dvl_model import predict_dvl
from .gp import GpModel
from .types import BaseMeasurement, CalibrationParams, DvlMeasurement, MotionState, Rotation3

PAPER_LINEAR_PSD = (500.0, 500.0, 500.0)
PAPER_ANGULAR_PSD = (5.0, 5.0, 5.0)
QUIET_ANGULAR_PSD = (1e-10, 1e-10, 1e-10)
PAPER_DVL_NOISE_VAR = 1e-4
PAPER_STATE_STD = (0.05, 0.02, 0.05, 0.02, 0.05, 0.02)


@dataclass(frozen=True)
class SimScenario:
    duration: float = 100.0
    dvl_rate: float = 10.0
    base_rate: float = 10.0
    kernel_first_half: tuple = PAPER_LINEAR_PSD + QUIET_ANGULAR_PSD
    kernel_second_half: tuple = PAPER_LINEAR_PSD + PAPER_ANGULAR_PSD
    true_params: CalibrationParams = field(
        default_factory=lambda: CalibrationParams(
            rotation=Rotation3.from_rotvec([0.2, -0.3, 0.5]),
            lever_arm=np.array([0.15, -0.10, 0.08]),
            scale=1.02,
            clock_offset=0.07,
        )
    )
    dvl_noise_var: Union[float, tuple] = PAPER_DVL_NOISE_VAR
    state_perturbation_std: tuple = PAPER_STATE_STD
    rng_seed: Union[int, tuple] = 0
    observe: str = "pose"  # which channels the base sensor reports

    def __post_init__(self):
        if self.duration <= 0 or self.dvl_rate <= 0 or self.base_rate <= 0:
            raise ValueError("duration and rates must be positive")
        if self.observe not in ("pose", "twist"):
            raise ValueError("observe must be 'pose' or 'twist'")

    # -- derived grids -------------------------------------------------------

    def base_times(self) -> np.ndarray:
        n = int(math.floor(self.base_rate * self.duration))
        return np.arange(max(n, 1)) / self.base_rate

    def dvl_stamps(self) -> np.ndarray:
        n = int(math.floor(self.dvl_rate * self.duration))
        return np.arange(max(n, 1)) / self.dvl_rate

    def dvl_physical_times(self) -> np.ndarray:
        return self.dvl_stamps() + self.true_params.clock_offset

    def sample_times(self) -> np.ndarray:
        """Sorted, deduplicated union of all instants the truth is needed at."""
        allt = np.concatenate([self.base_times(), self.dvl_physical_times()])
        allt = np.sort(allt)
        keep = np.ones(allt.size, dtype=bool)
        keep[1:] = np.diff(allt) > 1e-12
        return allt[keep]

    def psd_segments(self):
        """(switch_time, first-half psd, second-half psd) with 6-vectors."""
        first = np.asarray(self.kernel_first_half, dtype=float)
        second = np.asarray(self.kernel_second_half, dtype=float)
        return 0.5 * self.duration, first, second

    def matched_kernel(self, start_var: float = wnoj.DEFAULT_START_VAR) -> wnoj.WnojKernel:
        """The generating prior as a calibration kernel (two-phase switch
        included when the halves differ)."""
        switch, first, second = self.psd_segments()
        switches = [] if np.array_equal(first, second) else [(switch, second)]
        return wnoj.WnojKernel(output_scale=first, switches=switches,
                               start_var=start_var)

    def dvl_noise_cov(self) -> np.ndarray:
        var = np.asarray(self.dvl_noise_var, dtype=float)
        if var.ndim == 0:
            var = np.full(3, float(var))
        return np.diag(var)

    def base_noise_cov(self) -> np.ndarray:
        return np.diag(np.asarray(self.state_perturbation_std, dtype=float) ** 2)

    def model(self, delta_max: float = 0.5, start_var=None) -> GpModel:
        kwargs = {} if start_var is None else {"start_var": start_var}
        return GpModel(self.matched_kernel(**kwargs), self.base_times(),
                       self.dvl_stamps(), self.base_noise_cov(),
                       observe=self.observe, delta_max=delta_max)

    def with_seed(self, seed) -> "SimScenario":
        return replace(self, rng_seed=seed)


@dataclass(frozen=True)
class SimOutput:
    truth_states: list
    base_log: list
    dvl_log: list
    scenario: SimScenario

    def truth_at(self, times) -> list:
        """Truth states at the requested times (must be sample instants)."""
        stamps = np.array([s.timestamp for s in self.truth_states])
        idx = np.searchsorted(stamps, np.asarray(times, dtype=float) - 1e-9)
        out = []
        for t, i in zip(np.atleast_1d(times), idx):
            if i >= len(stamps) or abs(stamps[i] - t) > 1e-9:
                raise KeyError(f"no truth state at t={t}")
            out.append(self.truth_states[i])
        return out


def _rngs(scenario: SimScenario):
    seed = scenario.rng_seed
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    children = np.random.SeedSequence(entropy).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def sample_trajectory(scenario: SimScenario, rng=None) -> list:
    """Forward-simulate the piecewise-PSD WNOJ chain at all sample times."""
    if rng is None:
        rng, _, _ = _rngs(scenario)
    times = scenario.sample_times()
    switch, first, second = scenario.psd_segments()

    # insert the switch instant so no step straddles the PSD change
    grid = times
    if times[0] < switch < times[-1] and not np.any(np.abs(times - switch) <= 1e-12):
        grid = np.sort(np.append(times, switch))

    factor_cache = {}

    def step_factors(h, psd):
        key = (h, psd.tobytes())
        if key not in factor_cache:
            phi = wnoj.chain_transition(h)
            chols = [
                np.linalg.cholesky(wnoj.chain_process_cov(h, psd[a]))
                if psd[a] > 0.0 else None
                for a in range(6)
            ]
            factor_cache[key] = (phi, chols)
        return factor_cache[key]

    x = np.zeros((3, 6))  # [value, rate, acceleration] x axis, zero start
    states = {grid[0]: x.copy()}
    for k in range(grid.size - 1):
        t, t_next = grid[k], grid[k + 1]
        psd = first if t < switch - 1e-12 else second
        phi, chols = step_factors(t_next - t, psd)
        x = phi @ x
        for a in range(6):
            if chols[a] is not None:
                x[:, a] += chols[a] @ rng.standard_normal(3)
        states[t_next] = x.copy()

    return [
        MotionState(timestamp=t, pose6=states[t][0], vel6=states[t][1],
                    acc6=states[t][2])
        for t in times
    ]


def synthesize_measurements(truth: Sequence[MotionState],
                            scenario: SimScenario) -> SimOutput:
    """Generate noisy base and DVL logs from a sampled trajectory."""
    _, rng_dvl, rng_base = _rngs(scenario)
    stamps = np.array([s.timestamp for s in truth])

    def at(t):
        i = int(np.searchsorted(stamps, t - 1e-9))
        if i >= stamps.size or abs(stamps[i] - t) > 1e-9:
            raise ValueError(f"truth state missing at t={t}")
        return truth[i]

    base_cov = scenario.base_noise_cov()
    base_std = np.sqrt(np.diag(base_cov))
    channel = (lambda s: s.pose6) if scenario.observe == "pose" else (lambda s: s.vel6)
    base_log = [
        BaseMeasurement(timestamp=t,
                        observed=channel(at(t)) + base_std * rng_base.standard_normal(6),
                        noise_cov=base_cov)
        for t in scenario.base_times()
    ]

    dvl_cov = scenario.dvl_noise_cov()
    dvl_std = np.sqrt(np.diag(dvl_cov))
    dvl_log = []
    for stamp, phys in zip(scenario.dvl_stamps(), scenario.dvl_physical_times()):
        clean = predict_dvl(at(phys), scenario.true_params)
        dvl_log.append(DvlMeasurement(
            timestamp=stamp,
            velocity=clean + dvl_std * rng_dvl.standard_normal(3),
            noise_cov=dvl_cov,
        ))
    return SimOutput(truth_states=list(truth), base_log=base_log, dvl_log=dvl_log,
                     scenario=scenario)


def simulate(scenario: SimScenario) -> SimOutput:
    return synthesize_measurements(sample_trajectory(scenario), scenario)


def bias_study_scenario(seed=0) -> SimScenario:
    """Single-phase kernel, zero clock offset: the bias-elimination fixture."""
    return SimScenario(
        kernel_first_half=PAPER_LINEAR_PSD + PAPER_ANGULAR_PSD,
        kernel_second_half=PAPER_LINEAR_PSD + PAPER_ANGULAR_PSD,
        true_params=CalibrationParams(
            rotation=Rotation3.from_rotvec([0.2, -0.3, 0.5]),
            lever_arm=np.array([0.15, -0.10, 0.08]),
            scale=1.02,
            clock_offset=0.0,
        ),
        rng_seed=seed,
    )


def excitation_scenario(regime: str, seed=0) -> SimScenario:
    """Two-phase fixture: quiet first half; second half strongly rotating
    ("high") or still quiet ("low"). Clock offset fixed at 0.07 s."""
    if regime not in ("high", "low"):
        raise ValueError("regime must be 'high' or 'low'")
    second = PAPER_LINEAR_PSD + (PAPER_ANGULAR_PSD if regime == "high"
                                 else QUIET_ANGULAR_PSD)
    return SimScenario(
        kernel_first_half=PAPER_LINEAR_PSD + QUIET_ANGULAR_PSD,
        kernel_second_half=second,
        rng_seed=seed,
    )
