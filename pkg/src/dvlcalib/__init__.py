"""dvlcalib: spatiotemporal calibration of a Doppler velocity log against a
base sensor (rotation, lever arm, velocity scale factor, clock offset) with
a white-noise-on-jerk GP motion prior."""

from .errors import (CalibrationError, DegenerateZ1, EmptySet, FlatObjective,
                     InsufficientOverlap, MissingBracket, NonPositiveGram,
                     NotAntisymmetric, RankDeficient, SingularGram)
from .types import (BaseMeasurement, CalibrationParams, DvlMeasurement,
                    MotionState, Rotation3, rotation_from_rotvec, skew, unskew)
from .wnoj import BACKEND, WnojKernel, kernel_block
from .gp import (GpModel, GpPosterior, JointPosterior, interpolate_dvl,
                 regress_base, smooth_all)
from .dvl_model import DvlResidual, excitation_score, predict_dvl, residual_and_jacobians
from .init_calib import (GridSpec, InitConfig, InitEstimate, LowRotationSet,
                         StackedRegressor, clock_scale_objective,
                         estimate_clock_and_scale, initialize, recover_structured,
                         select_low_rotation, solve_Z_corrected, solve_Z_raw,
                         stack_regressor)
from .solver import (CalibStepResult, StepControl, UicConfig, UicTrace,
                     calibration_step, evaluate_map_objective, run_uic)
from .simulate import (SimOutput, SimScenario, bias_study_scenario,
                       excitation_scenario, sample_trajectory, simulate,
                       synthesize_measurements)
from .studies import (param_errors, rmse_table, run_bias_study,
                      run_excitation_study, run_refinement_study)
from .odometry import (OdometryTrack, OrientationTrack, TrajectoryErrors,
                       compute_ate, compute_rpe, dvl_dead_reckon, evaluate_tracks)

__version__ = "0.1.0"
