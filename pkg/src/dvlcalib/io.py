"""File formats: CSV logs, JSON configs and reports, all written atomically.

Timestamps carry 9 decimal places, values 12 significant digits. Covariances
are stored upper-triangular row-major (q11..q33 for the DVL, r11..r66 for
the base pose).
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .init_calib import GridSpec, InitConfig
from .odometry import OdometryTrack, OrientationTrack
from .simulate import SimScenario
from .solver import StepControl, UicConfig
from .types import (BaseMeasurement, CalibrationParams, DvlMeasurement,
                    Rotation3, rotation_matrix_from_rotvec,
                    rotvec_from_rotation_matrix)
from .wnoj import DEFAULT_START_VAR, WnojKernel

T_FMT = "{:.9f}"
V_FMT = "{:.12g}"

DVL_HEADER = ["t", "vx", "vy", "vz", "q11", "q12", "q13", "q22", "q23", "q33"]
BASE_HEADER = ["t", "px", "py", "pz", "rx", "ry", "rz"] + [
    f"r{i}{j}" for i in range(1, 7) for j in range(i, 7)
]
TRUTH_HEADER = ["t", "px", "py", "pz", "rx", "ry", "rz",
                "vx", "vy", "vz", "wx", "wy", "wz",
                "ax", "ay", "az", "awx", "awy", "awz"]
ORIENTATION_HEADER = ["t", "rx", "ry", "rz"]
TRACK_HEADER = ["t", "x", "y", "z", "qx", "qy", "qz", "qw"]
TRACE_HEADER = ["iteration", "objective", "kappa", "delta",
                "rot_angle_to_ref", "lever_x", "lever_y", "lever_z"]
LINESEARCH_HEADER = ["delta", "kappa", "objective"]
STUDY_HEADER = ["study", "regime", "N", "trial", "rot_err_rad", "t_err_m",
                "kappa_err", "delta_err_s"]


def atomic_write_text(path, text: str):
    """Write via a temp file + rename so a crash never leaves a truncated
    file under the final name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _fmt_row(t, values) -> list:
    return [T_FMT.format(t)] + [V_FMT.format(v) for v in values]


def _upper(mat, n):
    return [mat[i, j] for i in range(n) for j in range(i, n)]


def _unflatten_upper(values, n):
    mat = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            mat[i, j] = mat[j, i] = values[k]
            k += 1
    return mat


# -- measurement logs ----------------------------------------------------------

def write_dvl_csv(path, dvl_log):
    rows = [_fmt_row(m.timestamp, list(m.velocity) + _upper(m.noise_cov, 3))
            for m in dvl_log]
    atomic_write_text(path, _csv_text(DVL_HEADER, rows))


def load_dvl_csv(path) -> list:
    out = []
    for rec in _read_csv(path, DVL_HEADER):
        out.append(DvlMeasurement(timestamp=rec[0], velocity=rec[1:4],
                                  noise_cov=_unflatten_upper(rec[4:10], 3)))
    return out


def write_base_csv(path, base_log):
    rows = [_fmt_row(m.timestamp, list(m.observed) + _upper(m.noise_cov, 6))
            for m in base_log]
    atomic_write_text(path, _csv_text(BASE_HEADER, rows))


def load_base_csv(path) -> list:
    out = []
    for rec in _read_csv(path, BASE_HEADER):
        out.append(BaseMeasurement(timestamp=rec[0], observed=rec[1:7],
                                   noise_cov=_unflatten_upper(rec[7:28], 6)))
    return out


def write_truth_csv(path, states):
    rows = [_fmt_row(s.timestamp, list(s.pose6) + list(s.vel6) + list(s.acc6))
            for s in states]
    atomic_write_text(path, _csv_text(TRUTH_HEADER, rows))


def write_orientation_csv(path, track: OrientationTrack):
    rows = [
        _fmt_row(t, rotvec_from_rotation_matrix(track.rotations[i]))
        for i, t in enumerate(track.timestamps)
    ]
    atomic_write_text(path, _csv_text(ORIENTATION_HEADER, rows))


def load_orientation_csv(path) -> OrientationTrack:
    times, rots = [], []
    for rec in _read_csv(path, ORIENTATION_HEADER):
        times.append(rec[0])
        rots.append(rotation_matrix_from_rotvec(rec[1:4]))
    return OrientationTrack(np.array(times), np.stack(rots))


def write_track_csv(path, track: OdometryTrack):
    """Position-only track in TUM-style columns (identity quaternion)."""
    rows = [
        _fmt_row(t, list(track.positions[i]) + [0.0, 0.0, 0.0, 1.0])
        for i, t in enumerate(track.timestamps)
    ]
    atomic_write_text(path, _csv_text(TRACK_HEADER, rows))


def load_track_csv(path) -> OdometryTrack:
    times, pos = [], []
    for rec in _read_csv(path, TRACK_HEADER[:4], allow_extra=True):
        times.append(rec[0])
        pos.append(rec[1:4])
    return OdometryTrack(np.array(times), np.array(pos))


def _read_csv(path, expected_prefix, allow_extra=False):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if header[: len(expected_prefix)] != list(expected_prefix) or (
            not allow_extra and len(header) != len(expected_prefix)
        ):
            raise ValueError(
                f"{path}: unexpected header {header!r}; expected {expected_prefix!r}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                yield [float(x) for x in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: non-numeric field") from exc


# -- tabular outputs -----------------------------------------------------------

def write_study_csv(path, rows):
    text_rows = []
    for r in rows:
        text_rows.append([
            str(r["study"]), str(r["regime"]), str(int(r["N"])), str(int(r["trial"])),
            V_FMT.format(r["rot_err_rad"]), V_FMT.format(r["t_err_m"]),
            V_FMT.format(r["kappa_err"]), V_FMT.format(r["delta_err_s"]),
        ])
    atomic_write_text(path, _csv_text(STUDY_HEADER, text_rows))


def write_linesearch_csv(path, profile):
    rows = [[V_FMT.format(d), V_FMT.format(k), V_FMT.format(o)]
            for d, k, o in np.asarray(profile)]
    atomic_write_text(path, _csv_text(LINESEARCH_HEADER, rows))


def write_trace_csv(path, trace, reference: CalibrationParams = None):
    rows = []
    for r in trace.rows:
        ang = (reference.rotation.angle_to(r.params.rotation)
               if reference is not None else float("nan"))
        rows.append([
            str(r.iteration), V_FMT.format(r.objective),
            V_FMT.format(r.params.scale), V_FMT.format(r.params.clock_offset),
            V_FMT.format(ang),
            V_FMT.format(r.params.lever_arm[0]),
            V_FMT.format(r.params.lever_arm[1]),
            V_FMT.format(r.params.lever_arm[2]),
        ])
    atomic_write_text(path, _csv_text(TRACE_HEADER, rows))


# -- JSON configs and reports --------------------------------------------------

def params_to_dict(params: CalibrationParams) -> dict:
    return {
        "rotation_matrix": params.rotation.matrix.tolist(),
        "rotation_vector": params.rotation.as_rotvec().tolist(),
        "lever_arm_m": params.lever_arm.tolist(),
        "scale": params.scale,
        "clock_offset_s": params.clock_offset,
    }


def params_from_dict(d: dict) -> CalibrationParams:
    if "rotation_matrix" in d:
        rot = Rotation3(np.asarray(d["rotation_matrix"], dtype=float))
    else:
        rot = Rotation3.from_rotvec(np.asarray(d["rotation_vector"], dtype=float))
    return CalibrationParams(
        rotation=rot,
        lever_arm=np.asarray(d["lever_arm_m"], dtype=float),
        scale=float(d.get("scale", 1.0)),
        clock_offset=float(d.get("clock_offset_s", 0.0)),
    )


def write_json(path, payload: dict):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def scenario_to_dict(sc: SimScenario) -> dict:
    return {
        "duration": sc.duration,
        "dvl_rate": sc.dvl_rate,
        "base_rate": sc.base_rate,
        "kernel_first_half": list(sc.kernel_first_half),
        "kernel_second_half": list(sc.kernel_second_half),
        "true_params": params_to_dict(sc.true_params),
        "dvl_noise_var": (list(sc.dvl_noise_var)
                          if np.ndim(sc.dvl_noise_var) else sc.dvl_noise_var),
        "state_perturbation_std": list(sc.state_perturbation_std),
        "rng_seed": (list(sc.rng_seed) if isinstance(sc.rng_seed, (tuple, list))
                     else sc.rng_seed),
        "observe": sc.observe,
    }


def scenario_from_dict(d: dict) -> SimScenario:
    kwargs = {}
    for key in ("duration", "dvl_rate", "base_rate"):
        if key in d:
            kwargs[key] = float(d[key])
    for key in ("kernel_first_half", "kernel_second_half", "state_perturbation_std"):
        if key in d:
            kwargs[key] = tuple(float(x) for x in d[key])
    if "true_params" in d:
        kwargs["true_params"] = params_from_dict(d["true_params"])
    if "dvl_noise_var" in d:
        v = d["dvl_noise_var"]
        kwargs["dvl_noise_var"] = tuple(v) if isinstance(v, (list, tuple)) else float(v)
    if "rng_seed" in d:
        s = d["rng_seed"]
        kwargs["rng_seed"] = tuple(s) if isinstance(s, (list, tuple)) else int(s)
    if "observe" in d:
        kwargs["observe"] = str(d["observe"])
    return SimScenario(**kwargs)


def solver_config_from_dict(d: dict):
    """Parse a calibrate-mode config into (kernel, observe, delta_max,
    InitConfig, UicConfig)."""
    kd = d.get("kernel", {})
    kernel = WnojKernel(
        output_scale=np.asarray(kd.get("output_scale",
                                       [500.0, 500.0, 500.0, 5.0, 5.0, 5.0]),
                                dtype=float),
        start_var=float(kd.get("start_var", DEFAULT_START_VAR)),
        switches=[(float(t), np.asarray(psd, dtype=float))
                  for t, psd in kd.get("switches", [])],
    )
    sd = d.get("search", {})
    search = GridSpec(
        delta_max=float(sd.get("delta_max", 0.5)),
        delta_step=float(sd.get("delta_step", 1e-3)),
        kappa_min=float(sd.get("kappa_min", 0.95)),
        kappa_max=float(sd.get("kappa_max", 1.05)),
        kappa_step=float(sd.get("kappa_step", 0.005)),
        refine_tol=float(sd.get("refine_tol", 1e-5)),
    )
    init = InitConfig(
        omega_threshold=float(d.get("omega_threshold", 0.02)),
        search=search,
        bias_correction=bool(d.get("bias_correction", True)),
    )
    ud = d.get("uic", {})
    uic = UicConfig(
        max_iterations=int(ud.get("max_iterations", 50)),
        rotation_tol=float(ud.get("rotation_tol", 1e-5)),
        lever_tol=float(ud.get("lever_tol", 1e-4)),
        scale_tol=float(ud.get("scale_tol", 1e-5)),
        offset_tol=float(ud.get("offset_tol", 1e-5)),
        objective_tol=float(ud.get("objective_tol", 1e-8)),
        delta_fd_step=float(ud.get("delta_fd_step", 1e-5)),
        step_control=StepControl(),
        huber_delta=(float(ud["huber_delta"]) if ud.get("huber_delta") is not None
                     else None),
    )
    observe = d.get("observe", "pose")
    delta_max = float(d.get("delta_max", search.delta_max + 0.05))
    return kernel, observe, delta_max, init, uic
