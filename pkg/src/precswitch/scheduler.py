"""End-to-end schedule synthesis, verification and baseline comparison."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .intervals import SwitchingWindows, build_switching_windows
from .lti import (
    ScenarioSpec,
    SettlingReport,
    SettlingViolation,
    SystemSpec,
    TimingMetrics,
    Trajectory,
    band_arrays,
    check_settling,
    horizon_samples,
    lqr_cost,
    reference_targets,
    time_domain_metrics,
)
from .miqp import ModelOptions, build_schedule_program, error_response, presolve
from .precision import FORMATS, RoundingSpec, simulate_rounded
from .solver import MiqpSolution, branch_and_bound

__all__ = [
    "Precision",
    "Schedule",
    "NoFeasibleScheduleError",
    "SolverLimitError",
    "VerificationReport",
    "BaselineRow",
    "synthesize_schedule",
    "verify_schedule",
    "compare_baselines",
    "model_trajectory",
    "all_lo_sw",
]


class Precision(enum.IntEnum):
    """Precision levels, ordered from least to most accurate."""

    LO = 0
    HI = 1

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Schedule:
    """Run-length precision assignment over samples ``0..N``.

    ``segments`` holds ``(start, end, Precision)`` with inclusive ends.
    """

    segments: tuple
    N: int

    def __post_init__(self):
        segs = tuple((int(a), int(b), Precision(p)) for a, b, p in self.segments)
        if not segs:
            raise ValueError("a schedule needs at least one segment")
        if segs[0][0] != 0 or segs[-1][1] != self.N:
            raise ValueError(f"segments must cover samples 0..{self.N}")
        if segs[0][2] != Precision.HI:
            raise ValueError("the first segment must be hi precision")
        for (a0, b0, p0), (a1, b1, p1) in zip(segs, segs[1:]):
            if a1 != b0 + 1:
                raise ValueError(f"segments [{a0}, {b0}] and [{a1}, {b1}] are not contiguous")
            if p0 == p1:
                raise ValueError(f"adjacent segments at sample {a1} share a precision")
        if any(a > b for a, b, _ in segs):
            raise ValueError("segment start exceeds its end")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def from_sw(cls, sw) -> "Schedule":
        sw = np.asarray(np.round(sw), dtype=np.int64).ravel()
        N = sw.size - 1
        cuts = np.flatnonzero(np.diff(sw)) + 1
        starts = np.r_[0, cuts]
        ends = np.r_[cuts - 1, N]
        return cls(tuple((int(a), int(b), Precision(int(sw[a]))) for a, b in zip(starts, ends)), N)

    @classmethod
    def all_hi(cls, N: int) -> "Schedule":
        return cls(((0, N, Precision.HI),), N)

    def to_sw(self) -> np.ndarray:
        sw = np.empty(self.N + 1, dtype=np.int8)
        for a, b, p in self.segments:
            sw[a : b + 1] = int(p)
        return sw

    @property
    def switch_samples(self) -> tuple:
        return tuple(a for a, _, _ in self.segments[1:])

    @property
    def switch_count(self) -> int:
        return len(self.segments) - 1

    def lo_fraction(self) -> float:
        """Share of the ``N`` controller executions (samples ``1..N``) run in lo."""
        if self.N == 0:
            return 0.0
        return float(np.mean(self.to_sw()[1:] == 0))

    def runtime(self, t_lo: float, t_hi: float) -> float:
        sw = self.to_sw()[1:]
        return float(np.sum(np.where(sw == 1, t_hi, t_lo)))

    def legal_for(self, windows: SwitchingWindows) -> bool:
        """Every switch lies in a window and no window holds two."""
        used = set()
        for i in self.switch_samples:
            hit = [b for b, (lo, hi) in enumerate(windows) if lo <= i <= hi]
            if not hit or hit[0] in used:
                return False
            used.add(hit[0])
        return True


def all_lo_sw(N: int) -> np.ndarray:
    """Every sample but the initial one in lo precision (sample 0 does no arithmetic)."""
    sw = np.zeros(N + 1, dtype=np.int8)
    sw[0] = 1
    return sw


class NoFeasibleScheduleError(RuntimeError):
    """No schedule meets the band, not even all-hi; carries the tightest violation."""

    def __init__(self, violation: SettlingViolation, excess: float, status: str):
        super().__init__(
            f"no feasible schedule ({status}): band of step {violation.step} violated at sample "
            f"{violation.sample} by {excess:.6g} (y = {violation.value}) even with every sample in hi"
        )
        self.violation = violation
        self.excess = excess
        self.status = status


class SolverLimitError(RuntimeError):
    """The search stopped at a limit before finding any feasible schedule."""

    def __init__(self, status: str, nodes: int):
        super().__init__(f"solver stopped ({status}) after {nodes} nodes without a feasible schedule")
        self.status = status
        self.nodes = nodes


def model_trajectory(sys: SystemSpec, scen: ScenarioSpec, sw) -> Trajectory:
    """Error-inclusive trajectory of the MIQP model for a given switching vector."""
    N = horizon_samples(scen, sys.h)
    sw = np.asarray(sw, dtype=np.float64)
    e = scen.e_lo + (scen.e_hi - scen.e_lo) * sw
    e[0] = 0.0
    _, xss, uss = reference_targets(sys, scen, N)
    x, u, y = kernels.error_model_closed_loop(
        sys.A, sys.B, sys.C, sys.K, sys.x0, sys.u0, xss, uss, np.ascontiguousarray(e)
    )
    return Trajectory(x, u, y, sys.h, sw=np.asarray(np.round(sw), dtype=np.int8))


def _band_margins(sys, scen, sw, error_sign):
    """Per constrained (sample, output): signed excess over the band; positive means violated."""
    N = horizon_samples(scen, sys.h)
    lo, hi, mask, owner = band_arrays(scen, sys.h, N)
    traj = model_trajectory(sys, scen, sw)
    if error_sign == "symmetric":
        nominal = model_trajectory(sys, scen.with_errors(0.0, 0.0), sw).y
        _, gy = error_response(sys, N)
        e = scen.e_lo + (scen.e_hi - scen.e_lo) * np.asarray(sw, dtype=np.float64)
        e[0] = 0.0
        rho = np.array([np.abs(gy[k - np.arange(1, k + 1)]).T @ e[1 : k + 1] for k in range(N + 1)])
        y_hi, y_lo = nominal + rho, nominal - rho
    else:
        y_hi = y_lo = traj.y
    excess = np.maximum(y_hi - hi, lo - y_lo)
    excess[~mask] = -np.inf
    return traj, excess, owner


def _first_violation(traj, excess, owner, tol):
    bad = np.flatnonzero(np.any(excess > tol, axis=1))
    if bad.size == 0:
        return None
    i = int(bad[0])
    return SettlingViolation(int(owner[i]), i, tuple(float(v) for v in traj.y[i]))


def _tightest_violation(sys, scen, error_sign):
    N = horizon_samples(scen, sys.h)
    sw = np.ones(N + 1)
    traj, excess, owner = _band_margins(sys, scen, sw, error_sign)
    i, c = np.unravel_index(int(np.argmax(excess)), excess.shape)
    return SettlingViolation(int(owner[i]), int(i), tuple(float(v) for v in traj.y[i])), float(excess[i, c])


def synthesize_schedule(
    sys: SystemSpec,
    scen: ScenarioSpec,
    metrics: TimingMetrics | None = None,
    *,
    options: ModelOptions = ModelOptions(),
    gap_tol: float = 1e-6,
    node_limit: int = 1_000_000,
    time_limit: float | None = None,
    workers: int = 1,
    windows: SwitchingWindows | None = None,
):
    """Windows, MIQP, presolve, branch-and-bound, then run-length extraction.

    Metrics default to those measured on the nominal response to the first
    step.  Returns ``(Schedule, MiqpSolution)``; the solution status may be a
    limit status when the search was cut short with an incumbent in hand.

    Raises:
        NoFeasibleScheduleError: when not even the all-hi schedule meets the band.
    """
    N = horizon_samples(scen, sys.h)
    if windows is None:
        if metrics is None:
            metrics = time_domain_metrics(sys, scen.steps[0].reference, scen.delta[0])
        windows = build_switching_windows(scen, metrics, sys.h, N)
    problem = build_schedule_program(sys, scen, windows, options)
    reduced = presolve(problem)
    sol = branch_and_bound(reduced, gap_tol=gap_tol, node_limit=node_limit, time_limit=time_limit, workers=workers)
    if not sol.has_schedule and sol.status in ("node-limit", "gap-limit"):
        raise SolverLimitError(sol.status, sol.nodes)
    if not sol.has_schedule:
        violation, excess = _tightest_violation(sys, scen, options.error_sign)
        raise NoFeasibleScheduleError(violation, excess, sol.status)
    return Schedule.from_sw(sol.sw), sol


@dataclass(frozen=True)
class VerificationReport:
    model_feasible: bool
    model_violation: SettlingViolation | None
    emulated_status: str  # "pass", "fail" or "non-finite"
    emulated_violation: SettlingViolation | None
    model_cost: float
    emulated_cost: float
    runtime: float
    switch_count: int
    lo_fraction: float

    @property
    def emulated_feasible(self) -> bool:
        return self.emulated_status == "pass"


def _feas_tol(scen):
    scale = max(max(abs(v) for s in scen.steps for v in s.reference), max(scen.delta), 1.0)
    return 1e-9 * scale


def verify_schedule(
    sched: Schedule,
    sys: SystemSpec,
    scen: ScenarioSpec,
    *,
    lo: RoundingSpec = FORMATS["binary16"],
    hi: RoundingSpec = FORMATS["binary32"],
    error_sign: str = "positive",
) -> VerificationReport:
    """Check a schedule in the error-bounded model and in bit-accurate emulation.

    LQR costs are in deviation coordinates over samples ``0..N``; the emulated
    cost is NaN or infinite when the emulation overflows.
    """
    N = horizon_samples(scen, sys.h)
    if sched.N != N:
        raise ValueError(f"schedule spans {sched.N} samples, scenario needs {N}")
    sw = sched.to_sw()
    _, xss, uss = reference_targets(sys, scen, N)
    traj, excess, owner = _band_margins(sys, scen, sw, error_sign)
    model_violation = _first_violation(traj, excess, owner, _feas_tol(scen))
    emu = simulate_rounded(sys, scen, sw, lo=lo, hi=hi)
    report: SettlingReport = check_settling(emu, scen)
    if emu.nonfinite:
        status = "non-finite"
    else:
        status = "pass" if report.passed else "fail"
    return VerificationReport(
        model_feasible=model_violation is None,
        model_violation=model_violation,
        emulated_status=status,
        emulated_violation=report.first_violation,
        model_cost=lqr_cost(traj, sys.Q, sys.R, xss, uss),
        emulated_cost=lqr_cost(emu, sys.Q, sys.R, xss, uss),
        runtime=sched.runtime(scen.t_lo, scen.t_hi),
        switch_count=sched.switch_count,
        lo_fraction=sched.lo_fraction(),
    )


@dataclass(frozen=True)
class BaselineRow:
    name: str
    model_cost: float
    emulated_cost: float
    runtime: float
    model_feasible: bool
    emulated_status: str
    objective: float
    runtime_vs_hi_pct: float
    cost_vs_lo_pct: float


def compare_baselines(
    sys: SystemSpec,
    scen: ScenarioSpec,
    sched: Schedule,
    *,
    options: ModelOptions = ModelOptions(),
    lo: RoundingSpec = FORMATS["binary16"],
    hi: RoundingSpec = FORMATS["binary32"],
) -> list:
    """All-lo, all-hi and the given schedule side by side.

    ``runtime_vs_hi_pct`` is the runtime change relative to all-hi;
    ``cost_vs_lo_pct`` is the emulated LQR cost change relative to all-lo
    (NaN when the all-lo emulation is not finite).
    """
    N = sched.N
    candidates = [
        ("all-lo", Schedule.from_sw(all_lo_sw(N))),
        ("all-hi", Schedule.all_hi(N)),
        ("switching", sched),
    ]
    reports = [(name, s, verify_schedule(s, sys, scen, lo=lo, hi=hi, error_sign=options.error_sign))
               for name, s in candidates]
    hi_runtime = reports[1][2].runtime
    lo_cost = reports[0][2].emulated_cost
    rows = []
    for name, s, r in reports:
        objective = options.w1 * r.runtime + options.w2 * _model_objective_cost(sys, scen, s, options)
        rt_pct = 100.0 * (r.runtime - hi_runtime) / hi_runtime
        if np.isfinite(lo_cost) and lo_cost != 0.0:
            cost_pct = 100.0 * (r.emulated_cost - lo_cost) / lo_cost
        else:
            cost_pct = float("nan")
        rows.append(BaselineRow(name, r.model_cost, r.emulated_cost, r.runtime, r.model_feasible,
                                r.emulated_status, objective, rt_pct, cost_pct))
    return rows


def _model_objective_cost(sys, scen, sched, options):
    traj = model_trajectory(sys, scen, sched.to_sw())
    if options.cost_coordinates == "deviation":
        _, xss, uss = reference_targets(sys, scen, sched.N)
        return lqr_cost(traj, sys.Q, sys.R, xss, uss)
    return lqr_cost(traj, sys.Q, sys.R)

