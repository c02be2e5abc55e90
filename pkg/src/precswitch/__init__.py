"""Optimal precision-switching schedules for discrete-time feedback controllers."""

from .intervals import SwitchingWindows, build_switching_windows, validate_windows
from .lti import (
    ConfigError,
    ScenarioSpec,
    Step,
    SystemSpec,
    TimingMetrics,
    Trajectory,
    check_settling,
    lqr_cost,
    lqr_gain,
    simulate_nominal,
    steady_state,
    time_domain_metrics,
)
from .miqp import ModelOptions, build_schedule_program, encode_xor, presolve
from .precision import (
    FORMATS,
    RoundingSpec,
    VariableRanges,
    conservative_step_error_bound,
    round_to_format,
    simulate_rounded,
)
from .scheduler import Schedule, compare_baselines, synthesize_schedule, verify_schedule
from .solver import branch_and_bound, brute_force_schedule_search, solve_qp_relaxation

__version__ = "0.1.0"
