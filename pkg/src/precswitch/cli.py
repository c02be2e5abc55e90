"""Command-line entry point: ``precswitch <command> CONFIG [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 no feasible
schedule, 3 solver limit reached (the best schedule found is still written).
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigValidationError, RunConfig, load_config
from .intervals import build_switching_windows
from .lti import (
    ConfigError,
    UnsettledError,
    UntrackableReferenceError,
    band_arrays,
    horizon_samples,
    reference_targets,
    simulate_nominal,
    time_domain_metrics,
)
from .precision import simulate_rounded
from .scheduler import (
    NoFeasibleScheduleError,
    Precision,
    Schedule,
    SolverLimitError,
    all_lo_sw,
    compare_baselines,
    model_trajectory,
    synthesize_schedule,
    verify_schedule,
)
from . import kernels

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_LIMIT = 0, 1, 2, 3

SCHEDULE_HEADER = "# precswitch schedule v1"


def _fmt(v: float) -> str:
    return repr(float(v))


def _metrics(cfg: RunConfig):
    if cfg.metrics is not None:
        return cfg.metrics
    scen = cfg.scenario
    return time_domain_metrics(cfg.system, scen.steps[0].reference, scen.delta[0])


def _windows(cfg: RunConfig):
    N = horizon_samples(cfg.scenario, cfg.system.h)
    return build_switching_windows(cfg.scenario, _metrics(cfg), cfg.system.h, N), N


def _emit(text: str, path):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# schedule files ----------------------------------------------------------


def format_schedule(sched: Schedule, *, mu: int, status: str, objective: float, gap: float,
                    lower_bound: float, nodes: int) -> str:
    out = io.StringIO()
    out.write(SCHEDULE_HEADER + "\n")
    out.write(f"N {sched.N}\n")
    out.write(f"mu {mu}\n")
    out.write(f"status {status}\n")
    out.write(f"objective {_fmt(objective)}\n")
    out.write(f"lower_bound {_fmt(lower_bound)}\n")
    out.write(f"gap {_fmt(gap)}\n")
    out.write(f"nodes {nodes}\n")
    out.write(f"segments {len(sched.segments)}\n")
    for a, b, p in sched.segments:
        out.write(f"{a} {b} {p.label}\n")
    return out.getvalue()


def read_schedule(path) -> Schedule:
    """Parse a schedule file written by the ``schedule`` command."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    if not lines or lines[0] != SCHEDULE_HEADER:
        raise ValueError(f"{path}: not a schedule file (missing header)")
    header = {}
    segments = []
    it = iter(lines[1:])
    for ln in it:
        if not ln:
            continue
        key, _, value = ln.partition(" ")
        if key == "segments":
            for _ in range(int(value)):
                a, b, p = next(it).split()
                segments.append((int(a), int(b), Precision[p.upper()]))
            break
        header[key] = value
    if "N" not in header:
        raise ValueError(f"{path}: missing N")
    return Schedule(tuple(segments), int(header["N"]))


# trajectory CSV ----------------------------------------------------------


def trajectory_csv(cfg: RunConfig, traj) -> str:
    sys_, scen = cfg.system, cfg.scenario
    N = traj.N
    lo, hi, mask, _ = band_arrays(scen, sys_.h, N)
    _, xss, uss = reference_targets(sys_, scen, N)
    with np.errstate(all="ignore"):
        cost = np.cumsum(kernels.stage_costs(traj.x, traj.u, xss, uss, sys_.Q, sys_.R))
    q = sys_.q
    ys = [f"y_{c + 1}" for c in range(q)]
    if q == 1:
        bands = ["band_lo", "band_hi"]
    else:
        bands = [f"band_lo_{c + 1}" for c in range(q)] + [f"band_hi_{c + 1}" for c in range(q)]
    out = io.StringIO()
    out.write(",".join(["sample", "t_seconds", "sw"] + ys + bands + ["cum_cost"]) + "\n")
    sw = traj.sw if traj.sw is not None else np.ones(N + 1, dtype=np.int8)
    for k in range(N + 1):
        row = [str(k), f"{k * sys_.h:.10g}", str(int(sw[k]))]
        row += [_fmt(v) for v in traj.y[k]]
        if mask[k]:
            row += [_fmt(v) for v in lo[k]] + [_fmt(v) for v in hi[k]]
        else:
            row += [""] * (2 * q)
        row.append(_fmt(cost[k]))
        out.write(",".join(row) + "\n")
    return out.getvalue()


# commands ----------------------------------------------------------------


def cmd_intervals(cfg: RunConfig, args) -> int:
    windows, N = _windows(cfg)
    if args.json:
        _emit(json.dumps({"N": N, "mu": windows.mu, "windows": windows.as_lists()}) + "\n", args.output)
    else:
        lines = [f"N {N}", f"mu {windows.mu}"] + [f"[{lo}, {hi}]" for lo, hi in windows]
        _emit("\n".join(lines) + "\n", args.output)
    return EXIT_OK


def _synthesize(cfg: RunConfig, args):
    s = cfg.solver
    return synthesize_schedule(
        cfg.system,
        cfg.scenario,
        _metrics(cfg),
        options=cfg.options,
        gap_tol=s.gap,
        node_limit=s.node_limit,
        time_limit=s.time_limit,
        workers=args.workers or s.workers,
    )


def cmd_schedule(cfg: RunConfig, args) -> int:
    windows, _ = _windows(cfg)
    sched, sol = _synthesize(cfg, args)
    _emit(
        format_schedule(sched, mu=windows.mu, status=sol.status, objective=sol.objective, gap=sol.gap,
                        lower_bound=sol.lower_bound, nodes=sol.nodes),
        args.output,
    )
    return EXIT_OK if sol.status == "optimal" else EXIT_LIMIT


def cmd_simulate(cfg: RunConfig, args) -> int:
    sys_, scen = cfg.system, cfg.scenario
    N = horizon_samples(scen, sys_.h)
    if args.schedule:
        sw = read_schedule(args.schedule).to_sw()
    elif args.precision == "lo":
        sw = all_lo_sw(N)
    else:
        sw = np.ones(N + 1, dtype=np.int8)
    if args.mode == "model":
        traj = model_trajectory(sys_, scen, sw)
    elif args.precision == "nominal" and not args.schedule:
        traj = simulate_nominal(sys_, scen)
    else:
        traj = simulate_rounded(sys_, scen, sw, lo=cfg.lo_format, hi=cfg.hi_format)
    _emit(trajectory_csv(cfg, traj), args.output)
    return EXIT_OK


def _report_dict(rep) -> dict:
    def viol(v):
        return None if v is None else {"step": v.step, "sample": v.sample, "value": list(v.value)}

    return {
        "model_feasible": rep.model_feasible,
        "model_violation": viol(rep.model_violation),
        "emulated_status": rep.emulated_status,
        "emulated_violation": viol(rep.emulated_violation),
        "model_cost": rep.model_cost,
        "emulated_cost": rep.emulated_cost if np.isfinite(rep.emulated_cost) else None,
        "runtime": rep.runtime,
        "switch_count": rep.switch_count,
        "lo_fraction": rep.lo_fraction,
    }


def cmd_verify(cfg: RunConfig, args) -> int:
    sched = read_schedule(args.schedule)
    rep = verify_schedule(sched, cfg.system, cfg.scenario, lo=cfg.lo_format, hi=cfg.hi_format,
                          error_sign=cfg.options.error_sign)
    d = _report_dict(rep)
    if args.json:
        _emit(json.dumps(d, indent=2) + "\n", args.output)
    else:
        width = max(len(k) for k in d)
        _emit("".join(f"{k.ljust(width)}  {v}\n" for k, v in d.items()), args.output)
    return EXIT_OK


def _table(rows) -> str:
    header = ["schedule", "model_cost", "emulated_cost", "runtime_s", "runtime_vs_hi_%", "cost_vs_lo_%",
              "model_band", "emulated"]
    body = []
    for r in rows:
        body.append([
            r.name,
            f"{r.model_cost:.6g}",
            f"{r.emulated_cost:.6g}",
            f"{r.runtime:.6g}",
            f"{r.runtime_vs_hi_pct:+.2f}",
            f"{r.cost_vs_lo_pct:+.2f}" if np.isfinite(r.cost_vs_lo_pct) else "n/a",
            "pass" if r.model_feasible else "fail",
            r.emulated_status,
        ])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [header] + body]
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, args) -> int:
    status = "optimal"
    if args.schedule:
        sched = read_schedule(args.schedule)
    else:
        sched, sol = _synthesize(cfg, args)
        status = sol.status
    rows = compare_baselines(cfg.system, cfg.scenario, sched, options=cfg.options,
                             lo=cfg.lo_format, hi=cfg.hi_format)
    _emit(_table(rows), args.output)
    if args.json:
        payload = [
            {k: (v if not isinstance(v, float) or np.isfinite(v) else None) for k, v in vars(r).items()}
            for r in rows
        ]
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK if status == "optimal" else EXIT_LIMIT


COMMANDS = {
    "intervals": cmd_intervals,
    "schedule": cmd_schedule,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="precswitch", description="Precision-switching schedule synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("-o", "--output", default=None, help="output file (default: stdout)")

    p = sub.add_parser("intervals", help="print the switching windows")
    common(p)
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")

    p = sub.add_parser("schedule", help="synthesize an optimal schedule")
    common(p)
    p.add_argument("--workers", type=int, default=None, help="parallel node workers (overrides config)")

    p = sub.add_parser("simulate", help="write a trajectory CSV")
    common(p)
    p.add_argument("--precision", choices=["nominal", "lo", "hi"], default="nominal",
                   help="fixed precision for the whole run (ignored with --schedule)")
    p.add_argument("--schedule", help="schedule file to simulate")
    p.add_argument("--mode", choices=["emulated", "model"], default="emulated",
                   help="bit-accurate emulation or the error-bounded model")

    p = sub.add_parser("verify", help="verify a schedule file")
    common(p)
    p.add_argument("--schedule", required=True, help="schedule file written by 'schedule'")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")

    p = sub.add_parser("report", help="compare all-lo, all-hi and the switching schedule")
    common(p)
    p.add_argument("--schedule", help="use this schedule instead of synthesizing one")
    p.add_argument("--json", help="also write the table as JSON to this file")
    p.add_argument("--workers", type=int, default=None, help="parallel node workers (overrides config)")
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    payload = {"error": kind, "message": message}
    payload.update(extra)
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        return _fail("usage", f"config file not found: {args.config}", EXIT_USAGE)
    except ConfigValidationError as err:
        sys.stderr.write(err.as_json() + "\n")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except NoFeasibleScheduleError as err:
        v = err.violation
        return _fail("infeasible", str(err), EXIT_INFEASIBLE,
                     violation={"step": v.step, "sample": v.sample, "value": list(v.value), "excess": err.excess})
    except SolverLimitError as err:
        return _fail("limit", str(err), EXIT_LIMIT, status=err.status, nodes=err.nodes)
    except (ConfigError, UntrackableReferenceError, UnsettledError, ValueError, OSError) as err:
        return _fail("usage", str(err), EXIT_USAGE)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
