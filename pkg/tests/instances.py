"""Random small closed-loop instances shared by the solver and model tests."""

from dataclasses import dataclass

import numpy as np

from precswitch.intervals import SwitchingWindows
from precswitch.lti import (
    ScenarioSpec,
    Step,
    SystemSpec,
    UntrackableReferenceError,
    horizon_samples,
    lqr_gain,
    reference_targets,
    simulate_nominal,
)
from precswitch.miqp import ModelOptions


@dataclass
class Instance:
    sys: SystemSpec
    scen: ScenarioSpec
    windows: SwitchingWindows
    options: ModelOptions

    @property
    def N(self):
        return horizon_samples(self.scen, self.sys.h)


def random_system(rng, n=None, h=0.1):
    n = int(rng.integers(1, 4)) if n is None else n
    for _ in range(100):
        A = rng.normal(size=(n, n))
        A *= rng.uniform(0.4, 1.05) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
        B = rng.normal(size=(n, 1))
        C = rng.normal(size=(1, n))
        Q = np.diag(rng.uniform(0.1, 2.0, n))
        R = np.array([[rng.uniform(0.1, 2.0)]])
        try:
            K = lqr_gain(A, B, Q, R)
        except (RuntimeError, np.linalg.LinAlgError):
            continue
        M = np.block([[A, B], [K, np.zeros((1, 1))]])
        if np.max(np.abs(np.linalg.eigvals(M))) > 0.97:
            continue
        x0 = rng.normal(size=n) * 0.5
        sys = SystemSpec(A, B, C, K, h, x0, np.zeros(1), Q, R)
        return sys
    raise RuntimeError("could not draw a stabilisable system")


def _random_windows(rng, N, max_free):
    count = int(rng.integers(1, 4))
    widths = []
    budget = max_free
    for _ in range(count):
        if budget < 1:
            break
        w = int(rng.integers(1, min(budget, 6) + 1))
        widths.append(w)
        budget -= w
    span = sum(widths) + len(widths)
    start = int(rng.integers(1, max(2, N - span)))
    windows = []
    for w in widths:
        if start + w - 1 > N:
            break
        windows.append((start, start + w - 1))
        start += w + int(rng.integers(1, 4))
    return SwitchingWindows(tuple(windows))


def random_instance(seed, max_free=12, error_sign="positive"):
    """A system, scenario and window set with at most ``max_free`` in-window samples.

    Band half-widths are drawn relative to the nominal tracking error, so some
    instances are infeasible for every schedule and some only for lo-heavy ones.
    """
    rng = np.random.default_rng(seed)
    while True:
        sys = random_system(rng)
        h = sys.h
        N = int(rng.integers(14, 30))
        horizon = round(N * h, 10)
        gammas = rng.uniform(-2, 2, size=2)
        steps = [Step(0.0, (gammas[0],))]
        if rng.random() < 0.5:
            steps.append(Step(round(float(rng.integers(N // 3, 2 * N // 3)) * h, 10), (gammas[1],)))
        ts = float(rng.integers(2, 6)) * h
        try:
            scen = ScenarioSpec(tuple(steps), ts, 1.0, horizon, 1.0, 2.0)
            nom = simulate_nominal(sys, scen)
        except UntrackableReferenceError:
            continue
        _, xss, _ = reference_targets(sys, scen, N)
        yref = xss @ sys.C.T
        spread = float(np.max(np.abs(nom.y - yref)[N // 2 :])) + 1e-3
        e_lo = float(rng.uniform(0.0, 0.5)) * spread
        e_hi = e_lo * float(rng.uniform(0.0, 0.2))
        delta = spread * float(rng.uniform(0.3, 3.0))
        t_lo = float(rng.uniform(0.5, 1.0))
        t_hi = t_lo + float(rng.uniform(0.1, 1.0))
        scen = ScenarioSpec(tuple(steps), ts, delta, horizon, t_lo, t_hi, e_lo, e_hi)
        windows = _random_windows(rng, N, max_free)
        # scale w1 so the runtime and control terms compete
        lqr_scale = float(np.sum(nom.x**2)) + 1.0
        w1 = float(rng.uniform(0.0, 2.0)) * lqr_scale / (N * (t_hi - t_lo)) * 0.01
        options = ModelOptions(w1=w1, w2=1.0, error_sign=error_sign)
        return Instance(sys, scen, windows, options)
