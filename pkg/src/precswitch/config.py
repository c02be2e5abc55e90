"""Run configuration: strict JSON parsing with key-path diagnostics.

Top-level keys are ``system``, ``scenario``, ``precision`` and ``solver``;
README.md documents every field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lti import (
    ConfigError,
    ScenarioSpec,
    Step,
    SystemSpec,
    TimingMetrics,
    lqr_gain,
    simulate_nominal,
)
from .miqp import COST_COORDINATES, ERROR_SIGNS, ModelOptions
from .precision import (
    RoundingSpec,
    VariableRanges,
    conservative_step_error_bound,
    get_format,
)

__all__ = ["ConfigValidationError", "SolverSettings", "RunConfig", "parse_config", "load_config"]


class ConfigValidationError(ValueError):
    """All problems found in one configuration, each tagged with its key path."""

    def __init__(self, diagnostics: list):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.diagnostics))

    def as_json(self) -> str:
        return json.dumps(
            {"error": "invalid-config", "diagnostics": [{"path": p, "message": m} for p, m in self.diagnostics]},
            indent=2,
        )


@dataclass(frozen=True)
class SolverSettings:
    gap: float = 1e-6
    node_limit: int = 1_000_000
    time_limit: float | None = None
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    system: SystemSpec
    scenario: ScenarioSpec
    metrics: TimingMetrics | None
    lo_format: RoundingSpec
    hi_format: RoundingSpec
    options: ModelOptions
    solver: SolverSettings
    ranges: VariableRanges | None = None
    error_source: str = "config"
    raw: dict = field(default=None, repr=False, compare=False)


_KEYS = {
    "": {"system", "scenario", "precision", "solver"},
    "system": {"A", "B", "C", "K", "Q", "R", "h", "x0", "u0"},
    "scenario": {"steps", "delta", "delta_percent", "settling_time", "horizon", "t_lo", "t_hi", "metrics"},
    "scenario.metrics": {"rise_time", "peak_time", "settling_time"},
    "precision": {"lo_format", "hi_format", "e_lo", "e_hi", "ranges", "range_margin", "error_sign"},
    "precision.ranges": {"x", "u"},
    "solver": {"gap", "node_limit", "time_limit", "w1", "w2", "workers", "cost_coordinates"},
}
_REQUIRED = {
    "": {"system", "scenario"},
    "system": {"A", "B", "C", "h", "x0", "u0"},
    "scenario": {"steps", "settling_time", "horizon", "t_lo", "t_hi"},
    "scenario.metrics": {"rise_time", "peak_time", "settling_time"},
}


class _Collector:
    def __init__(self):
        self.items = []

    def add(self, path, message):
        self.items.append((path, message))

    def check_keys(self, block, path):
        if not isinstance(block, dict):
            self.add(path or "<root>", "expected an object")
            return False
        for k in sorted(set(block) - _KEYS[path]):
            self.add(f"{path}.{k}" if path else k, "unknown key")
        for k in sorted(_REQUIRED.get(path, set()) - set(block)):
            self.add(f"{path}.{k}" if path else k, "required key is missing")
        return True


def _number(c, block, key, path, *, default=None, positive=False, nonneg=False, integer=False):
    if key not in block:
        return default
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        c.add(f"{path}.{key}", "expected a number")
        return None
    if integer and not float(v).is_integer():
        c.add(f"{path}.{key}", "expected an integer")
        return None
    if not math.isfinite(v):
        c.add(f"{path}.{key}", "must be finite")
        return None
    if positive and not v > 0:
        c.add(f"{path}.{key}", "must be positive")
        return None
    if nonneg and v < 0:
        c.add(f"{path}.{key}", "must be non-negative")
        return None
    return int(v) if integer else float(v)


def _array(c, block, key, path, ndim):
    if key not in block:
        return None
    try:
        arr = np.array(block[key], dtype=np.float64)
    except (TypeError, ValueError):
        c.add(f"{path}.{key}", "expected a numeric array")
        return None
    if arr.ndim != ndim:
        c.add(f"{path}.{key}", f"expected a {ndim}-d array, got {arr.ndim}-d")
        return None
    if not np.all(np.isfinite(arr)):
        c.add(f"{path}.{key}", "entries must be finite")
        return None
    return arr


def _record_config_error(c, path, err):
    msg = str(err)
    head, sep, rest = msg.partition(":")
    if sep and " " not in head.strip():
        keys = head.strip().split("/")
        c.add(f"{path}.{keys[0]}", rest.strip())
    else:
        c.add(path, msg)


def _parse_system(c, block):
    path = "system"
    if not c.check_keys(block, path):
        return None
    mats = {k: _array(c, block, k, path, 2) for k in ("A", "B", "C", "K", "Q", "R")}
    vecs = {k: _array(c, block, k, path, 1) for k in ("x0", "u0")}
    h = _number(c, block, "h", path, positive=True)
    A, B = mats["A"], mats["B"]
    if A is not None and (A.shape[0] != A.shape[1]):
        c.add("system.A", f"must be square, got shape {A.shape}")
        return None
    if A is not None and B is not None and B.shape[0] != A.shape[0]:
        c.add("system.B", f"expected {A.shape[0]} rows, got shape {B.shape}")
        return None
    if any(v is None for k, v in mats.items() if k in block) or any(v is None for v in vecs.values()) or h is None:
        return None
    if A is None or B is None or mats["C"] is None:
        return None
    n, m = A.shape[0], B.shape[1]
    Q = mats["Q"] if mats["Q"] is not None else np.eye(n)
    R = mats["R"] if mats["R"] is not None else np.eye(m)
    K = mats["K"]
    if K is None:
        try:
            K = lqr_gain(A, B, Q, R)
        except (ValueError, np.linalg.LinAlgError, RuntimeError) as err:
            c.add("system.K", f"absent and the LQR synthesis failed: {err}")
            return None
    try:
        return SystemSpec(A, B, mats["C"], K, h, vecs["x0"], vecs["u0"], Q, R)
    except ConfigError as err:
        _record_config_error(c, path, err)
        return None


def _parse_scenario(c, block, e_lo, e_hi):
    path = "scenario"
    if not c.check_keys(block, path):
        return None, None
    steps = []
    raw_steps = block.get("steps")
    if raw_steps is not None:
        if not isinstance(raw_steps, list) or not raw_steps:
            c.add("scenario.steps", "expected a non-empty list of {time, reference} objects")
        else:
            for j, st in enumerate(raw_steps):
                sp = f"scenario.steps[{j}]"
                if not isinstance(st, dict):
                    c.add(sp, "expected an object")
                    continue
                for k in sorted(set(st) - {"time", "reference"}):
                    c.add(f"{sp}.{k}", "unknown key")
                t = _number(c, st, "time", sp, nonneg=True)
                ref = st.get("reference")
                if "time" not in st or ref is None:
                    c.add(sp, "needs both time and reference")
                    continue
                ref = [ref] if isinstance(ref, (int, float)) and not isinstance(ref, bool) else ref
                try:
                    ref = np.array(ref, dtype=np.float64).ravel()
                except (TypeError, ValueError):
                    c.add(f"{sp}.reference", "expected a number or list of numbers")
                    continue
                if t is not None:
                    steps.append(Step(t, tuple(ref)))
    has_d, has_p = "delta" in block, "delta_percent" in block
    delta = None
    if has_d == has_p:
        c.add("scenario.delta", "give exactly one of delta or delta_percent")
    elif has_d:
        d = block["delta"]
        delta = [d] if not isinstance(d, list) else d
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in delta):
            c.add("scenario.delta", "expected a number or a list of numbers")
            delta = None
    else:
        pct = _number(c, block, "delta_percent", path, positive=True)
        if pct is not None and steps:
            delta = [pct / 100.0 * float(np.max(np.abs(s.reference))) for s in steps]
            for j, d in enumerate(delta):
                if d <= 0:
                    c.add("scenario.delta_percent", f"step {j} has a zero reference; give an absolute delta")
    nums = {k: _number(c, block, k, path, positive=True) for k in ("settling_time", "horizon", "t_lo", "t_hi")}
    metrics = None
    if "metrics" in block:
        mb = block["metrics"]
        if c.check_keys(mb, "scenario.metrics"):
            vals = [_number(c, mb, k, "scenario.metrics", nonneg=True) for k in ("rise_time", "peak_time", "settling_time")]
            if None not in vals:
                try:
                    metrics = TimingMetrics(*vals)
                except (ConfigError, ValueError) as err:
                    c.add("scenario.metrics", str(err))
    if len(steps) != len(raw_steps or []) or delta is None or None in nums.values():
        return None, metrics
    try:
        scen = ScenarioSpec(
            steps=tuple(steps),
            settling_time=nums["settling_time"],
            delta=tuple(delta),
            horizon=nums["horizon"],
            t_lo=nums["t_lo"],
            t_hi=nums["t_hi"],
            e_lo=e_lo if e_lo is not None else 0.0,
            e_hi=e_hi if e_hi is not None else 0.0,
        )
    except ConfigError as err:
        msg = str(err)
        if msg.startswith("e_lo/e_hi"):
            c.add("precision.e_lo", msg.partition(":")[2].strip())
        elif msg.startswith("t_lo/t_hi"):
            c.add("scenario.t_lo", msg.partition(":")[2].strip())
        else:
            _record_config_error(c, path, err)
        return None, metrics
    return scen, metrics


def parse_config(tree: dict, *, source: str = "<config>") -> RunConfig:
    """Validate a decoded JSON tree.

    Raises:
        ConfigValidationError: listing every problem with its key path.
    """
    c = _Collector()
    if not c.check_keys(tree, ""):
        raise ConfigValidationError(c.items)
    prec = tree.get("precision", {})
    lo_fmt = hi_fmt = None
    e_lo = e_hi = None
    ranges = None
    ranges_mode = None
    error_sign = "positive"
    margin = 0.1
    if c.check_keys(prec, "precision"):
        for key, default in (("lo_format", "binary16"), ("hi_format", "binary32")):
            name = prec.get(key, default)
            try:
                fmt = get_format(str(name))
            except ConfigError as err:
                c.add(f"precision.{key}", str(err))
                fmt = None
            if key == "lo_format":
                lo_fmt = fmt
            else:
                hi_fmt = fmt
        e_lo = _number(c, prec, "e_lo", "precision", nonneg=True)
        e_hi = _number(c, prec, "e_hi", "precision", nonneg=True)
        if ("e_lo" in prec) != ("e_hi" in prec):
            c.add("precision.e_lo", "give both e_lo and e_hi, or neither")
        margin = _number(c, prec, "range_margin", "precision", default=0.1, nonneg=True)
        error_sign = prec.get("error_sign", "positive")
        if error_sign not in ERROR_SIGNS:
            c.add("precision.error_sign", f"must be one of {list(ERROR_SIGNS)}")
        raw_ranges = prec.get("ranges")
        if raw_ranges == "simulate":
            ranges_mode = "simulate"
        elif raw_ranges is not None:
            if c.check_keys(raw_ranges, "precision.ranges"):
                try:
                    ranges = VariableRanges(
                        x=tuple(tuple(r) for r in raw_ranges.get("x", [])),
                        u=tuple(tuple(r) for r in raw_ranges.get("u", [])),
                    )
                    ranges_mode = "config"
                except (ConfigError, TypeError, ValueError) as err:
                    _record_config_error(c, "precision", err)
        if e_lo is None and "e_lo" not in prec and ranges_mode is None:
            ranges_mode = "simulate"

    system = _parse_system(c, tree.get("system"))
    scen, metrics = _parse_scenario(c, tree.get("scenario"), e_lo, e_hi)

    sb = tree.get("solver", {})
    settings = SolverSettings()
    options = ModelOptions(error_sign=error_sign if error_sign in ERROR_SIGNS else "positive")
    if c.check_keys(sb, "solver"):
        gap = _number(c, sb, "gap", "solver", default=1e-6, nonneg=True)
        node_limit = _number(c, sb, "node_limit", "solver", default=1_000_000, positive=True, integer=True)
        time_limit = _number(c, sb, "time_limit", "solver", default=None, positive=True)
        workers = _number(c, sb, "workers", "solver", default=1, positive=True, integer=True)
        w1 = _number(c, sb, "w1", "solver", default=1.0, nonneg=True)
        w2 = _number(c, sb, "w2", "solver", default=1.0, nonneg=True)
        coords = sb.get("cost_coordinates", "deviation")
        if coords not in COST_COORDINATES:
            c.add("solver.cost_coordinates", f"must be one of {list(COST_COORDINATES)}")
        if None not in (gap, node_limit, workers, w1, w2) and coords in COST_COORDINATES:
            settings = SolverSettings(gap, node_limit, time_limit, workers)
            options = ModelOptions(w1=w1, w2=w2, error_sign=options.error_sign, cost_coordinates=coords)

    if system is not None and ranges is not None:
        if len(ranges.x) != system.n or len(ranges.u) != system.m:
            c.add("precision.ranges", f"expected {system.n} state and {system.m} input intervals")
    if system is not None and scen is not None and len(scen.steps[0].reference) != system.q:
        c.add("scenario.steps", f"references must have {system.q} entries (rows of C)")

    if c.items:
        raise ConfigValidationError(c.items)

    source_of_errors = "config"
    if e_lo is None:
        if ranges is None:
            ranges = VariableRanges.from_trajectory(simulate_nominal(system, scen), margin=margin)
        e_lo = conservative_step_error_bound(system, ranges, lo_fmt)
        e_hi = conservative_step_error_bound(system, ranges, hi_fmt)
        source_of_errors = "bound"
        try:
            scen = scen.with_errors(e_lo, e_hi)
        except ConfigError as err:
            raise ConfigValidationError([("precision", f"computed error bounds rejected: {err}")]) from None
    return RunConfig(system, scen, metrics, lo_fmt, hi_fmt, options, settings, ranges, source_of_errors, tree)


def load_config(path) -> RunConfig:
    """Read and validate a JSON configuration file.

    Raises:
        ConfigValidationError: on syntax errors (path ``<file>``) or invalid content.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        tree = json.loads(text, parse_constant=_reject_constant)
    except (json.JSONDecodeError, ValueError) as err:
        raise ConfigValidationError([("<file>", f"malformed JSON: {err}")]) from None
    return parse_config(tree, source=str(path))


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")
