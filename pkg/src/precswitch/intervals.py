"""Switching windows: the sample ranges in which one precision change is allowed."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from .lti import ScenarioSpec, TimingMetrics, to_fraction

__all__ = [
    "WindowOverlapError",
    "SwitchingWindows",
    "build_switching_windows",
    "validate_windows",
    "expected_window_count",
]


class WindowOverlapError(ValueError):
    def __init__(self, first: int, second: int, a, b):
        super().__init__(
            f"switching windows {first} {list(a)} and {second} {list(b)} overlap; "
            "timing metrics are too large for the step spacing"
        )
        self.pair = (first, second)


@dataclass(frozen=True)
class SwitchingWindows:
    windows: tuple

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple((int(lo), int(hi)) for lo, hi in self.windows))

    @property
    def mu(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, i):
        return self.windows[i]

    def widths(self) -> list:
        return [hi - lo + 1 for lo, hi in self.windows]

    def in_window_samples(self) -> int:
        return sum(self.widths())

    def as_lists(self) -> list:
        return [[lo, hi] for lo, hi in self.windows]


def _ceil(value) -> int:
    return math.ceil(value)


def expected_window_count(scen: ScenarioSpec, metrics: TimingMetrics) -> int:
    """Closed-form window count ``(2r - 1) + ceil((T - (t_r + 2 Ts)) / Ts)``, floored at ``2r - 1``."""
    r = scen.r
    T = to_fraction(scen.horizon)
    t_r = to_fraction(scen.steps[-1].time)
    Ts = to_fraction(metrics.settling_time)
    return (2 * r - 1) + max(0, _ceil((T - (t_r + 2 * Ts)) / Ts))


def build_switching_windows(
    scen: ScenarioSpec, metrics: TimingMetrics, h: float, N: int
) -> SwitchingWindows:
    """Windows around each step's transient plus periodic post-settle windows.

    The first step gets ``[ceil(Tp/h), ceil(Ts/h)]``.  Every later step at
    ``t_j`` gets ``[ceil(t_j/h), ceil((t_j + Tr/2)/h)]`` and
    ``[ceil((t_j + Tp)/h), ceil((t_j + Ts)/h)]``.  After the last step,
    two-sample windows start at ``tau = ceil((t_r + 2 Ts)/h)`` and repeat every
    ``ceil(Ts/h)`` samples while they fit inside the horizon.

    Raises:
        WindowOverlapError: when two windows are not strictly ordered and disjoint.
    """
    hf = to_fraction(h)
    Tr = to_fraction(metrics.rise_time)
    Tp = to_fraction(metrics.peak_time)
    Ts = to_fraction(metrics.settling_time)
    if Ts <= 0:
        raise ValueError("settling time must be positive to place switching windows")
    times = [to_fraction(s.time) for s in scen.steps]

    raw = [(_ceil((times[0] + Tp) / hf), _ceil((times[0] + Ts) / hf))]
    for t in times[1:]:
        raw.append((_ceil(t / hf), _ceil((t + Tr / 2) / hf)))
        raw.append((_ceil((t + Tp) / hf), _ceil((t + Ts) / hf)))

    windows = []
    for lo, hi in raw:
        lo = max(lo, 1)
        if lo > N:
            warnings.warn(f"switching window [{lo}, {hi}] starts beyond N={N}; dropped", stacklevel=2)
            continue
        if hi > N:
            warnings.warn(f"switching window [{lo}, {hi}] clipped to N={N}", stacklevel=2)
            hi = N
        windows.append((lo, hi))

    tau = _ceil((times[-1] + 2 * Ts) / hf)
    period = _ceil(Ts / hf)
    start = tau
    while start + 1 <= N:
        windows.append((start, start + 1))
        start += period

    for b in range(1, len(windows)):
        (lo_a, hi_a), (lo_b, hi_b) = windows[b - 1], windows[b]
        if not hi_a < lo_b or lo_b > hi_b:
            raise WindowOverlapError(b, b + 1, windows[b - 1], windows[b])
    return SwitchingWindows(tuple(windows))


def validate_windows(w, N: int) -> list:
    """All problems with a window set; an empty list means the set is usable."""
    wins = [tuple(x) for x in (w.windows if isinstance(w, SwitchingWindows) else w)]
    problems = []
    for b, (lo, hi) in enumerate(wins, start=1):
        if lo > hi:
            problems.append(f"window {b} [{lo}, {hi}]: lower end exceeds upper end")
        if lo < 1 or hi > N:
            problems.append(f"window {b} [{lo}, {hi}]: outside sample range [1, {N}]")
    for b in range(1, len(wins)):
        (lo_a, hi_a), (lo_b, hi_b) = wins[b - 1], wins[b]
        if lo_b < lo_a:
            problems.append(f"windows {b} and {b + 1}: out of order")
        if hi_a >= lo_b:
            problems.append(f"windows {b} and {b + 1}: overlap ([{lo_a}, {hi_a}] vs [{lo_b}, {hi_b}])")
    return problems
