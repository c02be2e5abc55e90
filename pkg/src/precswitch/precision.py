"""Reduced-precision emulation and conservative per-sample roundoff bounds.

Rounding follows the standard model for one operation in a binary format,

    fl(a op b) = (a op b)(1 + e) + d,   |e| <= eps_m,  |d| <= delta_m,

with round-to-nearest-even, gradual underflow and overflow to infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .lti import (
    ConfigError,
    ScenarioSpec,
    SystemSpec,
    Trajectory,
    horizon_samples,
    reference_targets,
)

__all__ = [
    "RoundingSpec",
    "FORMATS",
    "get_format",
    "round_to_format",
    "round_array",
    "VariableRanges",
    "ErrorTerm",
    "update_op_count",
    "conservative_step_error_bound",
    "simulate_rounded",
]


@dataclass(frozen=True)
class RoundingSpec:
    """A binary floating-point format.

    ``significand_bits`` counts the hidden bit (11 for binary16).
    """

    significand_bits: int
    min_exponent: int
    max_exponent: int
    name: str = ""

    def __post_init__(self):
        if self.significand_bits < 2:
            raise ValueError("significand_bits must be at least 2")
        if self.min_exponent >= self.max_exponent:
            raise ValueError("min_exponent must be below max_exponent")

    @property
    def eps_m(self) -> float:
        """Unit roundoff, half the spacing of the significand at 1."""
        return math.ldexp(1.0, -self.significand_bits)

    @property
    def delta_m(self) -> float:
        """Smallest subnormal magnitude; bounds the absolute error below the normal range."""
        return math.ldexp(1.0, self.min_exponent - self.significand_bits + 1)

    @property
    def max_finite(self) -> float:
        p = self.significand_bits
        return math.ldexp(2.0 - math.ldexp(1.0, 1 - p), self.max_exponent)

    @property
    def is_native(self) -> bool:
        return self.significand_bits >= 53 and self.min_exponent <= -1022 and self.max_exponent >= 1023

    def as_row(self) -> tuple:
        return (self.significand_bits, self.min_exponent, self.max_exponent)


FORMATS = {
    "binary16": RoundingSpec(11, -14, 15, "binary16"),
    "bfloat16": RoundingSpec(8, -126, 127, "bfloat16"),
    "binary32": RoundingSpec(24, -126, 127, "binary32"),
    "binary64": RoundingSpec(53, -1022, 1023, "binary64"),
}
_ALIASES = {"fp16": "binary16", "half": "binary16", "fp32": "binary32", "single": "binary32",
            "fp64": "binary64", "double": "binary64", "bf16": "bfloat16"}


def get_format(name: str) -> RoundingSpec:
    key = _ALIASES.get(name.lower(), name.lower())
    try:
        return FORMATS[key]
    except KeyError:
        raise ConfigError(f"unknown floating-point format {name!r}") from None


def round_to_format(v: float, spec: RoundingSpec) -> float:
    """Round one value into ``spec``; NaN and infinities pass through."""
    return float(kernels.round_scalar(float(v), *spec.as_row()))


def round_array(values, spec: RoundingSpec) -> np.ndarray:
    return kernels.round_array(values, *spec.as_row())


@dataclass(frozen=True)
class VariableRanges:
    """Closed physical ranges ``[lo, hi]`` for each state and input component."""

    x: tuple
    u: tuple

    def __post_init__(self):
        for name in ("x", "u"):
            rows = tuple((float(lo), float(hi)) for lo, hi in getattr(self, name))
            for i, (lo, hi) in enumerate(rows):
                if not (math.isfinite(lo) and math.isfinite(hi)):
                    raise ConfigError(f"ranges.{name}[{i}]: bounds must be finite")
                if lo > hi:
                    raise ConfigError(f"ranges.{name}[{i}]: empty range [{lo}, {hi}]")
            object.__setattr__(self, name, rows)

    @classmethod
    def from_trajectory(cls, traj: Trajectory, margin: float = 0.1) -> "VariableRanges":
        """Observed ranges of a trajectory, each widened by ``margin`` of its span."""

        def widen(col):
            lo, hi = float(np.min(col)), float(np.max(col))
            pad = margin * max(hi - lo, abs(lo), abs(hi), 1e-300)
            return lo - pad, hi + pad

        return cls(
            x=tuple(widen(traj.x[:, i]) for i in range(traj.x.shape[1])),
            u=tuple(widen(traj.u[:, i]) for i in range(traj.u.shape[1])),
        )


class ErrorTerm:
    """Magnitude bound and absolute error bound of one computed quantity.

    Each arithmetic operation adds ``eps_m * |result| + delta_m`` where
    ``|result|`` includes the operands' own error, so the bound is sound for
    round-to-nearest without overflow.  Operations whose result is exactly
    zero are exact.
    """

    __slots__ = ("mag", "err", "spec")

    def __init__(self, mag: float, err: float, spec: RoundingSpec):
        self.mag = float(mag)
        self.err = float(err)
        self.spec = spec

    @classmethod
    def exact(cls, mag: float, spec: RoundingSpec) -> "ErrorTerm":
        return cls(abs(mag), 0.0, spec)

    def _rounded(self, mag: float, err: float) -> "ErrorTerm":
        if mag == 0.0 and err == 0.0:
            return ErrorTerm(0.0, 0.0, self.spec)
        return ErrorTerm(mag, err + self.spec.eps_m * (mag + err) + self.spec.delta_m, self.spec)

    def scale(self, c: float) -> "ErrorTerm":
        """Product with an exactly represented constant."""
        c = abs(float(c))
        return self._rounded(c * self.mag, c * self.err)

    def __mul__(self, other: "ErrorTerm") -> "ErrorTerm":
        mag = self.mag * other.mag
        err = self.mag * other.err + other.mag * self.err + self.err * other.err
        return self._rounded(mag, err)

    def __add__(self, other: "ErrorTerm") -> "ErrorTerm":
        return self._rounded(self.mag + other.mag, self.err + other.err)

    __sub__ = __add__

    def __repr__(self):
        return f"ErrorTerm(mag={self.mag:.6g}, err={self.err:.6g}, {self.spec.name or self.spec.as_row()})"


def update_op_count(sys: SystemSpec) -> int:
    """Floating-point operations in one controller + plant + output update."""
    n, m, q = sys.n, sys.m, sys.q
    controller = m * (n + n + (n - 1) + 1)
    plant = n * ((n + m) + (n + m - 1))
    output = q * (n + (n - 1))
    return controller + plant + output


def _dot_bound(coeffs, terms):
    acc = None
    for c, t in zip(coeffs, terms):
        prod = t.scale(c)
        acc = prod if acc is None else acc + prod
    return acc


def conservative_step_error_bound(sys: SystemSpec, ranges: VariableRanges, spec: RoundingSpec) -> float:
    """Upper bound on the absolute roundoff error of one sample's update.

    Covers the controller ``u = u_ss + K (x - x_ss)``, the plant
    ``x+ = A x + B u`` and the output ``y = C x``, evaluated in the same
    order as the emulation, with stored state and input taken as exact
    and ``x_ss``/``u_ss`` assumed to lie inside the given ranges.
    Returns the largest bound over all computed components.
    """
    if len(ranges.x) != sys.n or len(ranges.u) != sys.m:
        raise ConfigError(
            f"ranges: expected {sys.n} state and {sys.m} input intervals, "
            f"got {len(ranges.x)} and {len(ranges.u)}"
        )
    xs = [ErrorTerm.exact(max(abs(lo), abs(hi)), spec) for lo, hi in ranges.x]
    us = [ErrorTerm.exact(max(abs(lo), abs(hi)), spec) for lo, hi in ranges.u]
    zero = ErrorTerm(0.0, 0.0, spec)
    # x - x_ss, both inside the same range
    devs = [zero._rounded(hi - lo, 0.0) if hi > lo else zero for lo, hi in ranges.x]
    worst = 0.0
    for i in range(sys.m):
        acc = _dot_bound(sys.K[i], devs)
        out = us[i] + acc
        worst = max(worst, out.err)
    for i in range(sys.n):
        acc = _dot_bound(list(sys.A[i]) + list(sys.B[i]), xs + us)
        worst = max(worst, acc.err)
    for i in range(sys.q):
        acc = _dot_bound(sys.C[i], xs)
        worst = max(worst, acc.err)
    return worst


def _schedule_vector(sched, N: int) -> np.ndarray:
    if hasattr(sched, "to_sw"):
        sw = sched.to_sw()
    else:
        sw = np.asarray(sched)
    sw = np.asarray(sw).astype(np.int8).ravel()
    if sw.shape != (N + 1,):
        raise ValueError(f"schedule covers {sw.shape[0]} samples, expected {N + 1}")
    return sw


def simulate_rounded(
    sys: SystemSpec,
    scen: ScenarioSpec,
    sched,
    lo: RoundingSpec = FORMATS["binary16"],
    hi: RoundingSpec = FORMATS["binary32"],
) -> Trajectory:
    """Closed loop with every scalar operation of sample ``k`` rounded to its precision.

    ``sched`` is a :class:`~precswitch.scheduler.Schedule` or a 0/1 vector of
    length ``N + 1`` (1 = hi).  Non-finite values propagate and are reported by
    :attr:`Trajectory.nonfinite`.
    """
    N = horizon_samples(scen, sys.h)
    sw = _schedule_vector(sched, N)
    _, xss, uss = reference_targets(sys, scen, N)
    fmt = np.where(sw[:, None] == 1, np.array(hi.as_row()), np.array(lo.as_row())).astype(np.int64)
    with np.errstate(all="ignore"):
        x, u, y = kernels.rounded_closed_loop(
            np.ascontiguousarray(sys.A),
            np.ascontiguousarray(sys.B),
            np.ascontiguousarray(sys.C),
            np.ascontiguousarray(sys.K),
            np.ascontiguousarray(sys.x0),
            np.ascontiguousarray(sys.u0),
            xss,
            uss,
            np.ascontiguousarray(fmt),
        )
    return Trajectory(x, u, y, sys.h, sw=sw)
