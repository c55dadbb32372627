"""Command-line surface: simulate / calibrate / evaluate / study.

Exit codes (stable interface): 0 success, 2 configuration or input error,
3 output I/O error, 4 iteration limit reached (results still written),
5 rank-deficient regressor (insufficient excitation or too little data),
6 insufficient trajectory overlap.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .errors import CalibrationError, InsufficientOverlap, RankDeficient
from .gp import GpModel
from .init_calib import initialize
from .odometry import dvl_dead_reckon, evaluate_tracks
from .simulate import simulate
from .solver import run_uic
from .studies import run_bias_study, run_excitation_study

log = logging.getLogger("dvlcalib")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ITERATION_LIMIT = 4
EXIT_RANK_DEFICIENT = 5
EXIT_OVERLAP = 6


class ConfigError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("DVLCALIB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


def _load_json_config(path) -> dict:
    p = _require_file(path)
    try:
        return dio.load_json(p)
    except ValueError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    payload = _load_json_config(args.scenario)
    try:
        scenario = dio.scenario_from_dict(payload)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    out = Path(args.out)
    sim = simulate(scenario)
    dio.write_base_csv(out / "base.csv", sim.base_log)
    dio.write_dvl_csv(out / "dvl.csv", sim.dvl_log)
    dio.write_truth_csv(out / "truth.csv", sim.truth_states)
    dio.write_json(out / "scenario_echo.json", dio.scenario_to_dict(scenario))
    print(f"wrote {len(sim.base_log)} base rows, {len(sim.dvl_log)} DVL rows to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    base_path = _require_file(args.base)
    dvl_path = _require_file(args.dvl)
    config = _load_json_config(args.config) if args.config else {}
    try:
        base_log = dio.load_base_csv(base_path)
        dvl_log = dio.load_dvl_csv(dvl_path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(dvl_log) < 7:
        raise RankDeficient(
            f"{dvl_path}: {len(dvl_log)} DVL rows; at least 7 are required")
    try:
        kernel, observe, delta_max, init_cfg, uic_cfg = \
            dio.solver_config_from_dict(config)
        model = GpModel(kernel,
                        [m.timestamp for m in base_log],
                        [m.timestamp for m in dvl_log],
                        np.stack([m.noise_cov for m in base_log]),
                        observe=observe, delta_max=delta_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    init_est = initialize(model, base_log, dvl_log, init_cfg)
    params, joint, trace = run_uic(base_log, dvl_log, model, uic_cfg,
                                   init_estimate=init_est)

    out = Path(args.out)
    diagnostics = {k: v for k, v in init_est.diagnostics.items() if k != "profile"}
    diagnostics.update({
        "iterations": len(trace) - 1,
        "final_objective": trace.rows[-1].objective,
        "converged": not trace.hit_iteration_limit,
        "stop_reason": trace.stop_reason,
        "dvl_residual_rms": trace.rows[-1].dvl_residual_rms,
    })
    payload = dio.params_to_dict(params)
    payload["diagnostics"] = diagnostics
    dio.write_json(out / "calibration.json", payload)
    dio.write_trace_csv(out / "trace.csv", trace)
    dio.write_linesearch_csv(out / "linesearch.csv", init_est.diagnostics["profile"])
    print(f"calibration written to {out / 'calibration.json'} "
          f"({diagnostics['stop_reason']})")
    return EXIT_ITERATION_LIMIT if trace.hit_iteration_limit else EXIT_OK


def cmd_evaluate(args) -> int:
    dvl_path = _require_file(args.dvl)
    orient_path = _require_file(args.orientation)
    ref_path = _require_file(args.reference)
    calib_path = _require_file(args.calibration)
    try:
        dvl_log = dio.load_dvl_csv(dvl_path)
        orientation = dio.load_orientation_csv(orient_path)
        reference = dio.load_track_csv(ref_path)
        params = dio.params_from_dict(dio.load_json(calib_path))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    track = dvl_dead_reckon(dvl_log, orientation, params)
    errors = evaluate_tracks(track, reference, horizon=args.horizon)
    out = Path(args.out)
    dio.write_track_csv(out / "track.csv", track)
    dio.write_json(out / "metrics.json", {
        "ate_m": errors.ate,
        "rpe_m": errors.rpe,
        "horizon_s": errors.horizon,
        "n_associations": errors.n_associations,
    })
    print(f"ATE {errors.ate:.4f} m, RPE {errors.rpe:.4f} m "
          f"({errors.n_associations} associations)")
    return EXIT_OK


def cmd_study(args) -> int:
    out = Path(args.out)
    n_list = [int(x) for x in args.n_list.split(",")] if args.n_list else None
    if args.kind == "bias":
        rows = run_bias_study(n_list or [10, 50, 100, 500, 1000],
                              trials=args.trials, seed=args.seed, jobs=args.jobs)
        path = out / "study_bias.csv"
    else:
        methods = tuple(args.methods.split(","))
        rows = run_excitation_study(n_list or (10, 50, 100, 500, 1000),
                                    trials=args.trials, methods=methods,
                                    seed=args.seed, jobs=args.jobs)
        path = out / "study_excitation.csv"
    dio.write_study_csv(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvlcalib",
        description="DVL / base-sensor spatiotemporal calibration toolbox")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate synthetic logs")
    p_sim.add_argument("scenario", help="scenario JSON file")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_cal = sub.add_parser("calibrate", help="run the calibration pipeline")
    p_cal.add_argument("base", help="base pose log CSV")
    p_cal.add_argument("dvl", help="DVL velocity log CSV")
    p_cal.add_argument("--config", default=None, help="solver config JSON")
    p_cal.add_argument("--out", required=True)
    p_cal.set_defaults(func=cmd_calibrate)

    p_eval = sub.add_parser("evaluate", help="dead-reckon and score a calibration")
    p_eval.add_argument("dvl")
    p_eval.add_argument("orientation", help="world-frame orientation CSV")
    p_eval.add_argument("reference", help="reference track CSV")
    p_eval.add_argument("calibration", help="calibration JSON")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--horizon", type=float, default=1.0)
    p_eval.set_defaults(func=cmd_evaluate)

    p_study = sub.add_parser("study", help="Monte Carlo studies")
    p_study.add_argument("kind", choices=["bias", "excitation"])
    p_study.add_argument("--out", required=True)
    p_study.add_argument("--trials", type=int, default=None)
    p_study.add_argument("--n-list", default=None, help="comma-separated N values")
    p_study.add_argument("--methods", default="init,uic",
                         help="excitation study methods (init,uic)")
    p_study.add_argument("--seed", type=int, default=0)
    p_study.add_argument("--jobs", type=int, default=1)
    p_study.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "study" and args.trials is None:
        args.trials = 50 if args.kind == "bias" else 20
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RankDeficient as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RANK_DEFICIENT
    except InsufficientOverlap as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OVERLAP
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
