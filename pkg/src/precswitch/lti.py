"""Discrete-time LTI closed loop: specs, nominal simulation, LQR cost and timing metrics.

The loop follows the logical-execution-time model: the input applied during
sample ``k`` was computed from the state sampled at ``k - 1``::

    x[k+1] = A x[k] + B u[k]
    u[k]   = u_ss + K (x[k-1] - x_ss)
    y[k]   = C x[k]

Nonzero references are tracked in deviation coordinates around the steady
state ``(x_ss, u_ss)`` of the active step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import kernels

__all__ = [
    "ConfigError",
    "UntrackableReferenceError",
    "UnsettledError",
    "Step",
    "SystemSpec",
    "ScenarioSpec",
    "Trajectory",
    "TimingMetrics",
    "SettlingViolation",
    "SettlingReport",
    "to_fraction",
    "ceil_samples",
    "horizon_samples",
    "steady_state",
    "reference_targets",
    "band_arrays",
    "constrained_ranges",
    "lqr_gain",
    "simulate_nominal",
    "lqr_cost",
    "time_domain_metrics",
    "check_settling",
]


class ConfigError(ValueError):
    """Invalid system or scenario data."""


class UntrackableReferenceError(ValueError):
    def __init__(self, step_index: int, residual: float):
        super().__init__(
            f"step {step_index + 1}: no steady state (x_ss, u_ss) reaches the reference "
            f"(residual {residual:.3e})"
        )
        self.step_index = step_index
        self.residual = residual


class UnsettledError(RuntimeError):
    def __init__(self, horizon: float):
        super().__init__(f"output does not settle within the {horizon:g} s horizon")
        self.horizon = horizon


def _matrix(value, name: str, ndim: int = 2) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != ndim:
        raise ConfigError(f"{name}: expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: entries must be finite")
    arr.setflags(write=False)
    return arr


def to_fraction(t: float) -> Fraction:
    """Exact rational for a time value given in decimal seconds."""
    if isinstance(t, Fraction):
        return t
    if isinstance(t, int):
        return Fraction(t)
    return Fraction(repr(float(t)))


def ceil_samples(t, h) -> int:
    """``ceil(t / h)`` evaluated in exact rational arithmetic."""
    return math.ceil(to_fraction(t) / to_fraction(h))


@dataclass(frozen=True)
class SystemSpec:
    """Plant, static feedback gain, LQR weights and sampling period."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    h: float
    x0: np.ndarray
    u0: np.ndarray
    Q: np.ndarray = None
    R: np.ndarray = None

    def __post_init__(self):
        A = _matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigError(f"A: must be square, got {A.shape}")
        B = _matrix(self.B, "B")
        if B.shape[0] != n:
            B = B.T if B.shape[1] == n and B.shape[0] == 1 else B
        if B.shape[0] != n:
            raise ConfigError(f"B: expected {n} rows, got shape {B.shape}")
        m = B.shape[1]
        C = _matrix(self.C, "C")
        if C.shape[1] != n:
            raise ConfigError(f"C: expected {n} columns, got shape {C.shape}")
        K = _matrix(self.K, "K")
        if K.shape != (m, n):
            raise ConfigError(f"K: expected shape {(m, n)}, got {K.shape}")
        Q = np.eye(n) if self.Q is None else _matrix(self.Q, "Q")
        R = np.eye(m) if self.R is None else _matrix(self.R, "R")
        if Q.shape != (n, n):
            raise ConfigError(f"Q: expected shape {(n, n)}, got {Q.shape}")
        if R.shape != (m, m):
            raise ConfigError(f"R: expected shape {(m, m)}, got {R.shape}")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ConfigError("Q: must be symmetric")
        if not np.allclose(R, R.T, rtol=0, atol=1e-12 * max(1.0, np.abs(R).max())):
            raise ConfigError("R: must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, np.abs(Q).max()):
            raise ConfigError("Q: must be positive semidefinite")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ConfigError("R: must be positive definite") from None
        x0 = _matrix(self.x0, "x0", ndim=1)
        u0 = _matrix(self.u0, "u0", ndim=1)
        if x0.shape != (n,):
            raise ConfigError(f"x0: expected length {n}, got {x0.shape[0]}")
        if u0.shape != (m,):
            raise ConfigError(f"u0: expected length {m}, got {u0.shape[0]}")
        h = float(self.h)
        if not (h > 0 and math.isfinite(h)):
            raise ConfigError("h: sampling period must be positive")
        for name, value in dict(A=A, B=B, C=C, K=K, Q=Q, R=R, x0=x0, u0=u0, h=h).items():
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    def closed_loop_matrix(self) -> np.ndarray:
        """Transition of the stacked state ``(x[k], u[k])`` under the delayed feedback."""
        n, m = self.n, self.m
        top = np.hstack([self.A, self.B])
        bottom = np.hstack([self.K, np.zeros((m, m))])
        return np.vstack([top, bottom])


@dataclass(frozen=True)
class Step:
    time: float
    reference: tuple

    def __post_init__(self):
        ref = np.atleast_1d(np.asarray(self.reference, dtype=np.float64))
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "reference", tuple(float(v) for v in ref))


@dataclass(frozen=True)
class ScenarioSpec:
    """Step references, settling requirement, horizon and per-precision costs.

    ``delta`` may be a scalar or one half-width per step.
    """

    steps: tuple
    settling_time: float
    delta: tuple
    horizon: float
    t_lo: float
    t_hi: float
    e_lo: float = 0.0
    e_hi: float = 0.0

    def __post_init__(self):
        steps = tuple(s if isinstance(s, Step) else Step(*s) for s in self.steps)
        if not steps:
            raise ConfigError("steps: at least one step is required")
        delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        if delta.size == 1:
            delta = np.repeat(delta, len(steps))
        if delta.size != len(steps):
            raise ConfigError(f"delta: expected 1 or {len(steps)} values, got {delta.size}")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "delta", tuple(float(d) for d in delta))
        for name in ("settling_time", "horizon", "t_lo", "t_hi", "e_lo", "e_hi"):
            object.__setattr__(self, name, float(getattr(self, name)))
        q = len(steps[0].reference)
        if any(len(s.reference) != q for s in steps):
            raise ConfigError("steps: all references must have the same length")
        if steps[0].time != 0.0:
            raise ConfigError("steps: the first step must be at t = 0")
        times = [to_fraction(s.time) for s in steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("steps: step instants must be strictly increasing")
        if times[-1] >= to_fraction(self.horizon):
            raise ConfigError("horizon: must exceed the last step instant")
        if not self.settling_time > 0:
            raise ConfigError("settling_time: must be positive")
        if any(not d > 0 for d in self.delta):
            raise ConfigError("delta: band half-widths must be positive")
        if not (0 < self.t_lo <= self.t_hi):
            raise ConfigError("t_lo/t_hi: require 0 < t_lo <= t_hi")
        if not (0 <= self.e_hi <= self.e_lo):
            raise ConfigError("e_lo/e_hi: require 0 <= e_hi <= e_lo")

    @property
    def r(self) -> int:
        return len(self.steps)

    def with_errors(self, e_lo: float, e_hi: float) -> "ScenarioSpec":
        from dataclasses import replace

        return replace(self, e_lo=e_lo, e_hi=e_hi)


def horizon_samples(scen: ScenarioSpec, h: float) -> int:
    return ceil_samples(scen.horizon, h)


@dataclass(frozen=True)
class Trajectory:
    """Sampled state, input and output sequences, indexed ``0..N``."""

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    h: float
    sw: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("x", "u", "y"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.x.shape[0] == self.u.shape[0] == self.y.shape[0]):
            raise ValueError("x, u and y must have the same number of samples")

    @property
    def N(self) -> int:
        return self.x.shape[0] - 1

    @property
    def nonfinite(self) -> bool:
        return not (
            np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))
        )

    def first_nonfinite(self):
        """Index of the first sample holding a NaN or infinity, or ``None``."""
        bad = ~(
            np.isfinite(self.x).all(axis=1)
            & np.isfinite(self.u).all(axis=1)
            & np.isfinite(self.y).all(axis=1)
        )
        idx = np.flatnonzero(bad)
        return int(idx[0]) if idx.size else None


@dataclass(frozen=True)
class TimingMetrics:
    rise_time: float
    peak_time: float
    settling_time: float

    def __post_init__(self):
        for name in ("rise_time", "peak_time", "settling_time"):
            value = float(getattr(self, name))
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name}: must be a finite non-negative time")
            object.__setattr__(self, name, value)


def steady_state(sys: SystemSpec, reference, step_index: int = 0, tol: float = 1e-9):
    """Solve ``x = A x + B u, C x = reference``.

    Square systems use an LU solve; singular or non-square ones fall back to
    least squares.

    Raises:
        UntrackableReferenceError: when the residual is not (numerically) zero.
    """
    n, m, q = sys.n, sys.m, sys.q
    ref = np.asarray(reference, dtype=np.float64).reshape(q)
    M = np.block([[sys.A - np.eye(n), sys.B], [sys.C, np.zeros((q, m))]])
    rhs = np.concatenate([np.zeros(n), ref])
    sol = None
    if n + q == n + m:
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            pass
    if sol is None or not np.all(np.isfinite(sol)):
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    residual = float(np.abs(M @ sol - rhs).max())
    if residual > tol * max(1.0, float(np.abs(ref).max())):
        raise UntrackableReferenceError(step_index, residual)
    return sol[:n], sol[n:]


def reference_targets(sys: SystemSpec, scen: ScenarioSpec, N: int):
    """Per-sample active step index and steady-state targets.

    Returns ``(step_of, xss, uss)`` with shapes ``(N+1,)``, ``(N+1, n)``, ``(N+1, m)``.
    Step ``j`` is active from sample ``ceil(t_j / h)`` on.
    """
    starts = [ceil_samples(s.time, sys.h) for s in scen.steps]
    targets = [steady_state(sys, s.reference, j) for j, s in enumerate(scen.steps)]
    step_of = np.zeros(N + 1, dtype=np.int64)
    for j, k0 in enumerate(starts):
        step_of[min(k0, N + 1) :] = j
    xss = np.array([targets[j][0] for j in step_of]).reshape(N + 1, sys.n)
    uss = np.array([targets[j][1] for j in step_of]).reshape(N + 1, sys.m)
    return step_of, xss, uss


def constrained_ranges(scen: ScenarioSpec, h: float, N: int):
    """Inclusive sample ranges ``(j, first, last)`` on which the band of step ``j`` holds."""
    out = []
    times = [to_fraction(s.time) for s in scen.steps] + [to_fraction(scen.horizon)]
    Ts = to_fraction(scen.settling_time)
    hf = to_fraction(h)
    for j in range(scen.r):
        first = math.ceil((times[j] + Ts) / hf)
        last = min(math.ceil(times[j + 1] / hf), N)
        if first <= last:
            out.append((j, first, last))
    return out


def band_arrays(scen: ScenarioSpec, h: float, N: int):
    """Per-sample band limits and mask of samples under a settling constraint.

    Where the ranges of two steps meet, both bands apply (their intersection).
    """
    q = len(scen.steps[0].reference)
    lo = np.full((N + 1, q), -np.inf)
    hi = np.full((N + 1, q), np.inf)
    mask = np.zeros(N + 1, dtype=np.bool_)
    owner = np.full(N + 1, -1, dtype=np.int64)
    for j, first, last in constrained_ranges(scen, h, N):
        ref = np.asarray(scen.steps[j].reference)
        for i in range(first, last + 1):
            if mask[i]:
                lo[i] = np.maximum(lo[i], ref - scen.delta[j])
                hi[i] = np.minimum(hi[i], ref + scen.delta[j])
            else:
                lo[i] = ref - scen.delta[j]
                hi[i] = ref + scen.delta[j]
            mask[i] = True
            owner[i] = j
    return lo, hi, mask, owner


def lqr_gain(A, B, Q, R, tol: float = 1e-12, max_iter: int = 200_000) -> np.ndarray:
    """Discrete-time LQR gain by Riccati value iteration, sign convention ``u = K x``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy()
    for _ in range(max_iter):
        S = R + B.T @ P @ B
        G = np.linalg.solve(S, B.T @ P @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ G
        P_next = 0.5 * (P_next + P_next.T)
        if np.abs(P_next - P).max() <= tol * max(1.0, np.abs(P_next).max()):
            P = P_next
            break
        P = P_next
    else:
        raise RuntimeError("Riccati iteration did not converge")
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def _loop_inputs(sys: SystemSpec):
    return (
        np.ascontiguousarray(sys.A),
        np.ascontiguousarray(sys.B),
        np.ascontiguousarray(sys.C),
        np.ascontiguousarray(sys.K),
        np.ascontiguousarray(sys.x0),
        np.ascontiguousarray(sys.u0),
    )


def simulate_nominal(sys: SystemSpec, scen: ScenarioSpec, N: int | None = None) -> Trajectory:
    """Closed-loop trajectory in binary64 with the fixed kernel evaluation order."""
    if N is None:
        N = horizon_samples(scen, sys.h)
    _, xss, uss = reference_targets(sys, scen, N)
    fmt = np.tile(np.array([53, -1022, 1023], dtype=np.int64), (N + 1, 1))
    x, u, y = kernels.rounded_closed_loop(*_loop_inputs(sys), xss, uss, fmt)
    return Trajectory(x, u, y, sys.h)


def lqr_cost(traj: Trajectory, Q, R, x_ref=None, u_ref=None) -> float:
    """Finite-horizon LQR cost over samples ``0..N``.

    Pass ``x_ref``/``u_ref`` (per-sample targets) for deviation coordinates;
    omit them for the raw form.  Any non-finite term makes the result NaN or inf.
    """
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    n, m = traj.x.shape[1], traj.u.shape[1]
    if Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError(f"weight shapes {Q.shape}, {R.shape} do not match n={n}, m={m}")
    xr = np.zeros_like(traj.x) if x_ref is None else np.broadcast_to(x_ref, traj.x.shape)
    ur = np.zeros_like(traj.u) if u_ref is None else np.broadcast_to(u_ref, traj.u.shape)
    with np.errstate(all="ignore"):
        terms = kernels.stage_costs(
            np.ascontiguousarray(traj.x),
            np.ascontiguousarray(traj.u),
            np.ascontiguousarray(xr),
            np.ascontiguousarray(ur),
            np.ascontiguousarray(Q),
            np.ascontiguousarray(R),
        )
        return float(np.sum(terms))


def time_domain_metrics(
    sys: SystemSpec, reference: Sequence[float], delta: float, n_samples: int = 5000
) -> TimingMetrics:
    """Rise, peak and settling time of the step response from ``x0``.

    Progress toward the reference is measured per output component relative to
    the initial output; the slowest component determines each metric.  Without
    an overshoot the peak time falls back to the first band entry.
    """
    ref = np.atleast_1d(np.asarray(reference, dtype=np.float64))
    scen = ScenarioSpec(
        steps=(Step(0.0, ref),),
        settling_time=sys.h,
        delta=delta,
        horizon=n_samples * sys.h,
        t_lo=1.0,
        t_hi=1.0,
    )
    traj = simulate_nominal(sys, scen, N=n_samples)
    y = traj.y
    h = sys.h
    y0 = y[0]
    inband = np.all(np.abs(y - ref) <= delta, axis=1)
    outside = np.flatnonzero(~inband)
    if outside.size and outside[-1] == n_samples:
        raise UnsettledError(n_samples * h)
    k_settle = int(outside[-1]) + 1 if outside.size else 0
    k_rise = 0
    k_peak = 0
    for i in range(y.shape[1]):
        span = ref[i] - y0[i]
        if span == 0:
            continue
        progress = (y[:, i] - y0[i]) / span
        reached = np.flatnonzero(progress >= 0.9)
        k_rise = max(k_rise, int(reached[0]) if reached.size else n_samples)
        peak = None
        for k in range(1, n_samples):
            if progress[k] > 1.0 and progress[k] >= progress[k + 1]:
                peak = k
                break
        if peak is None:
            entered = np.flatnonzero(np.abs(y[:, i] - ref[i]) <= delta)
            peak = int(entered[0]) if entered.size else n_samples
        k_peak = max(k_peak, peak)
    # a peak inside the band after settling does not move the settling window
    k_peak = min(k_peak, k_settle)
    return TimingMetrics(k_rise * h, k_peak * h, k_settle * h)


@dataclass(frozen=True)
class SettlingViolation:
    step: int
    sample: int
    value: tuple


@dataclass(frozen=True)
class SettlingReport:
    passed: bool
    first_violation: SettlingViolation | None = None
    nonfinite: bool = False


def check_settling(traj: Trajectory, scen: ScenarioSpec) -> SettlingReport:
    """Check the reference band on every constrained sample of every step."""
    N = traj.N
    for j, first, last in constrained_ranges(scen, traj.h, N):
        ref = np.asarray(scen.steps[j].reference)
        d = scen.delta[j]
        for i in range(first, last + 1):
            yi = traj.y[i]
            if not np.all((yi >= ref - d) & (yi <= ref + d)):
                return SettlingReport(
                    False,
                    SettlingViolation(j, i, tuple(float(v) for v in yi)),
                    nonfinite=not np.all(np.isfinite(yi)),
                )
    return SettlingReport(True, None, nonfinite=traj.nonfinite)
