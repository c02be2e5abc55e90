"""Branch-and-bound for the reduced convex MIQP, and an enumeration oracle.

Node relaxations are solved with the Clarabel interior-point solver over the
free binaries ``s`` (relaxed to ``[0, 1]``) and one continuous ``chi`` per XOR
pair.  Fixed binaries are substituted out before each solve.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from . import kernels
from .intervals import SwitchingWindows
from .lti import ScenarioSpec, SystemSpec, band_arrays, horizon_samples, reference_targets
from .miqp import (
    CONST_ONE,
    CONST_ZERO,
    ModelOptions,
    ReducedProblem,
    build_schedule_program,
    error_response,
)

__all__ = [
    "DegenerateQPError",
    "SearchSpaceTooLarge",
    "QpRelaxation",
    "MiqpSolution",
    "BruteForceResult",
    "solve_qp_relaxation",
    "branch_and_bound",
    "brute_force_schedule_search",
]

INT_TOL = 1e-6
FEAS_TOL = 1e-8


class DegenerateQPError(RuntimeError):
    """The relaxation solver failed for numerical reasons."""

    def __init__(self, status: str, diagnostics: dict):
        details = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"QP relaxation failed with status {status} ({details})")
        self.status = status
        self.diagnostics = diagnostics


class SearchSpaceTooLarge(ValueError):
    def __init__(self, cardinality: int, limit: int):
        super().__init__(f"refusing to enumerate {cardinality} schedules (limit {limit})")
        self.cardinality = cardinality
        self.limit = limit


@dataclass
class QpRelaxation:
    """Relaxation result at one node.

    ``s`` covers every free binary (fixed ones at their fixed value).  ``bound``
    is a valid lower bound on the objective of every completion of the node.
    """

    status: str
    s: np.ndarray = None
    chi: np.ndarray = None
    objective: float = math.inf
    bound: float = math.inf
    kkt_residual: float = math.nan
    iterations: int = 0


@dataclass
class MiqpSolution:
    status: str
    s: np.ndarray
    sw: np.ndarray
    objective: float
    lower_bound: float
    gap: float
    nodes: int
    elapsed: float = 0.0
    assignment: np.ndarray = field(default=None, repr=False)

    @property
    def has_schedule(self) -> bool:
        return self.s is not None


_SETTINGS_OVERRIDES = dict(
    verbose=False,
    tol_gap_abs=1e-11,
    tol_gap_rel=1e-11,
    tol_feas=1e-11,
    tol_ktratio=1e-9,
    max_iter=300,
)


def _settings():
    s = clarabel.DefaultSettings()
    for k, v in _SETTINGS_OVERRIDES.items():
        setattr(s, k, v)
    return s


def _node_program(rp: ReducedProblem, fixings: dict):
    """Relaxation of one node as ``min 1/2 v'Pv + q'v + const`` s.t. ``Av <= b``.

    Returns ``None`` when a fixing already violates a constant row.
    """
    F = rp.n_free
    fixed = np.zeros(F, dtype=bool)
    vals = np.zeros(F)
    for j, v in fixings.items():
        fixed[j] = True
        vals[j] = v
    free = np.flatnonzero(~fixed)
    col = np.full(F, -1)
    col[free] = np.arange(free.size)
    nf = free.size

    H = rp.H
    sf = vals[fixed]
    Hff = H[np.ix_(free, free)]
    q_s = rp.g[free] + H[np.ix_(free, fixed)] @ sf
    const = rp.c0 + rp.g[fixed] @ sf + 0.5 * sf @ H[np.ix_(fixed, fixed)] @ sf

    # pairs whose both ends are known are constants; the rest need a chi column
    def ref_value(r):
        if r == CONST_ZERO:
            return 0.0, -1
        if r == CONST_ONE:
            return 1.0, -1
        if fixed[r]:
            return vals[r], -1
        return 0.0, int(col[r])

    chi_col = {}
    chi_const = {}
    pair_terms = []
    for k, (a, b) in enumerate(rp.pairs):
        va, ca = ref_value(a)
        vb, cb = ref_value(b)
        pair_terms.append((va, ca, vb, cb))
        if ca < 0 and cb < 0:
            chi_const[k] = abs(va - vb)
        else:
            chi_col[k] = nf + len(chi_col)
    nv = nf + len(chi_col)

    rows, cols, data, rhs = [], [], [], []

    def add(entries, b):
        r = len(rhs)
        for c, v in entries:
            rows.append(r)
            cols.append(c)
            data.append(v)
        rhs.append(b)

    # band rows; drop rows that cannot bind anywhere in the box
    if rp.G.shape[0]:
        Gf = rp.G[:, free]
        hb = rp.hb - rp.G[:, fixed] @ sf
        worst = np.maximum(Gf, 0.0).sum(axis=1)
        scale = np.maximum(1.0, np.abs(hb))
        if np.any((Gf == 0.0).all(axis=1) & (hb < -1e-9 * scale)):
            return None
        live = worst > hb - 1e-12 * scale
        for r in np.flatnonzero(live):
            nz = np.flatnonzero(Gf[r])
            add(zip(nz.tolist(), Gf[r, nz].tolist()), float(hb[r]))

    for k, (va, ca, vb, cb) in enumerate(pair_terms):
        if k not in chi_col:
            continue
        x = chi_col[k]
        const_ab = (va if ca < 0 else 0.0), (vb if cb < 0 else 0.0)
        for sa, sb, sx, base in ((1, -1, -1, 0.0), (-1, 1, -1, 0.0), (1, 1, 1, 2.0), (-1, -1, 1, 0.0)):
            entries = [(x, float(sx))]
            b = base - sa * const_ab[0] - sb * const_ab[1]
            if ca >= 0:
                entries.append((ca, float(sa)))
            if cb >= 0:
                entries.append((cb, float(sb)))
            add(entries, b)

    for grp in rp.groups:
        fixed_sum = sum(chi_const.get(k, 0.0) for k in grp)
        if fixed_sum > 1.0 + 1e-12:
            return None
        entries = [(chi_col[k], 1.0) for k in grp if k in chi_col]
        if entries:
            add(entries, 1.0 - fixed_sum)

    for j in range(nf):
        add([(j, 1.0)], 1.0)
        add([(j, -1.0)], 0.0)

    A = sp.csc_matrix((data, (rows, cols)), shape=(len(rhs), nv))
    b = np.asarray(rhs, dtype=np.float64)
    Pd = np.zeros((nv, nv))
    Pd[:nf, :nf] = Hff
    q = np.zeros(nv)
    q[:nf] = q_s
    return dict(
        P=Pd, q=q, A=A, b=b, const=float(const), free=free, fixed=fixed, vals=vals,
        chi_col=chi_col, chi_const=chi_const,
    )


def _kkt_residual(P, q, A, b, v, z, obj):
    Pv = P @ v
    Atz = A.T @ z
    Av = A @ v
    stat = np.max(np.abs(Pv + q + Atz), initial=0.0) / max(
        1.0, np.max(np.abs(q), initial=0.0), np.max(np.abs(Pv), initial=0.0), np.max(np.abs(Atz), initial=0.0)
    )
    prim = max(0.0, float(np.max(Av - b, initial=0.0))) / max(1.0, np.max(np.abs(b), initial=0.0))
    dual = max(0.0, float(np.max(-z, initial=0.0)))
    comp = abs(float(z @ (b - Av))) / max(1.0, abs(obj))
    return float(max(stat, prim, dual, comp))


def solve_qp_relaxation(rp: ReducedProblem, fixings: dict | None = None) -> QpRelaxation:
    """Continuous relaxation of ``rp`` with some binaries fixed.

    Raises:
        DegenerateQPError: if the interior-point solve neither converges nor
            certifies infeasibility.
    """
    fixings = dict(fixings or {})
    F = rp.n_free
    prog = _node_program(rp, fixings)
    if prog is None:
        return QpRelaxation("infeasible")
    P, q, A, b = prog["P"], prog["q"], prog["A"], prog["b"]
    nv = q.size
    free, vals = prog["free"], prog["vals"]

    def assemble(v):
        s = vals.copy()
        s[free] = v[: free.size]
        chi = np.empty(len(rp.pairs))
        for k, c in prog["chi_col"].items():
            chi[k] = v[c]
        for k, c in prog["chi_const"].items():
            chi[k] = c
        return s, chi

    if nv == 0:
        s, chi = assemble(np.zeros(0))
        if np.any(b < -FEAS_TOL * np.maximum(1.0, np.abs(b))):
            return QpRelaxation("infeasible")
        obj = prog["const"]
        return QpRelaxation("optimal", s, chi, obj, obj, 0.0, 0)

    solver = clarabel.DefaultSolver(
        sp.triu(sp.csc_matrix(P)).tocsc(), q, A, b, [clarabel.NonnegativeConeT(b.size)], _settings()
    )
    sol = solver.solve()
    status = str(sol.status)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return QpRelaxation("infeasible", iterations=sol.iterations)
    v = np.clip(np.asarray(sol.x), -1e300, 1e300)
    z = np.maximum(np.asarray(sol.z), 0.0)
    obj = float(0.5 * v @ P @ v + q @ v)
    kkt = _kkt_residual(P, q, A, b, v, z, obj + prog["const"])
    if status not in ("Solved", "AlmostSolved") and not kkt <= 1e-8:
        H = P[: free.size, : free.size]
        eig = np.linalg.eigvalsh(H) if H.size else np.zeros(1)
        raise DegenerateQPError(
            status,
            dict(
                variables=nv,
                rows=b.size,
                kkt_residual=kkt,
                hessian_min_eig=float(eig[0]),
                hessian_max_eig=float(eig[-1]),
                hessian_condition=float(abs(eig[-1]) / max(abs(eig[0]), 1e-300)),
            ),
        )
    # Lagrangian dual value, corrected for the leftover stationarity residual
    # over the box; valid whatever the accuracy of (v, z).
    dual_val = _dual_bound(P, q, A, b, v, z, free.size)
    bound = min(obj, dual_val) + prog["const"]
    s, chi = assemble(v)
    s = np.clip(s, 0.0, 1.0)
    return QpRelaxation("optimal", s, chi, obj + prog["const"], bound, kkt, sol.iterations)


def _dual_bound(P, q, A, b, v, z, n_box):
    """Lower bound ``min_{w in box} L(w, z)`` using a linearisation at ``v``.

    ``L(w, z) >= L(v, z) + r'(w - v)`` by convexity, with ``r`` the gradient of
    the Lagrangian at ``v``.  The box here is ``[0, 1]`` for the relaxed
    binaries and ``[0, 1]`` for chi (implied by the XOR and cardinality rows).
    """
    r = P @ v + q + A.T @ z
    lag = 0.5 * v @ P @ v + q @ v + z @ (A @ v - b)
    # the box rows are in A, so the exact optimum has r = 0; the correction
    # only absorbs solver inaccuracy
    lo = np.zeros_like(v)
    hi = np.ones_like(v)
    corr = np.sum(np.minimum(r * (lo - v), r * (hi - v)))
    return float(lag + corr)


def _is_integral(s):
    return bool(np.all(np.abs(s - np.round(s)) <= INT_TOL))


def _branch_var(s, fixings):
    frac = np.minimum(s, 1.0 - s)
    if fixings:
        frac[list(fixings)] = -1.0
    j = int(np.argmax(frac))
    return j if frac[j] > INT_TOL else None


def _check_candidate(rp: ReducedProblem, s):
    s = np.round(s)
    scale = max(1.0, float(np.max(np.abs(rp.hb), initial=0.0)))
    if rp.violation(s) > 1e-9 * scale:
        return None
    return s, rp.objective(s)


def branch_and_bound(
    rp: ReducedProblem,
    gap_tol: float = 1e-6,
    node_limit: int = 1_000_000,
    time_limit: float | None = None,
    workers: int = 1,
) -> MiqpSolution:
    """Best-first branch-and-bound on the most fractional binary.

    A node is pruned when its bound is within ``gap_tol * |incumbent|`` of the
    incumbent.  Statuses: ``optimal``, ``infeasible``, ``node-limit`` and
    ``gap-limit`` (time limit hit; the reported gap is what was proven).
    With ``workers > 1`` batches of nodes are solved concurrently; the
    objective still meets the gap contract but ties may resolve differently.
    """
    start = time.perf_counter()
    if rp.status == "infeasible":
        return _finish(rp, "infeasible", None, math.inf, math.inf, 0, start)

    inc_s, inc_obj = None, math.inf
    if rp.n_free:
        cand = _check_candidate(rp, rp.all_hi())
        if cand is not None:
            inc_s, inc_obj = cand

    def prune_level():
        return inc_obj - gap_tol * abs(inc_obj) if math.isfinite(inc_obj) else math.inf

    root = solve_qp_relaxation(rp, {})
    nodes = 1
    if root.status == "infeasible":
        status = "optimal" if inc_s is not None else "infeasible"
        return _finish(rp, status, inc_s, inc_obj, inc_obj, nodes, start)
    if rp.n_free == 0:
        return _finish(rp, "optimal", root.s, root.objective, root.bound, nodes, start)

    counter = itertools.count()
    heap = [(root.bound, next(counter), {}, root)]
    global_lb = root.bound
    status = "optimal"
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while heap:
            if heap[0][0] >= prune_level():
                break
            if nodes >= node_limit:
                status = "node-limit"
                break
            if time_limit is not None and time.perf_counter() - start > time_limit:
                status = "gap-limit"
                break
            batch = []
            while heap and len(batch) < max(1, workers) and heap[0][0] < prune_level():
                batch.append(heapq.heappop(heap))
            tasks = []
            for bound, _, fix, relax in batch:
                j = _branch_var(relax.s, fix)
                if j is None:
                    cand = _check_candidate(rp, relax.s)
                    if cand is not None and cand[1] < inc_obj:
                        inc_s, inc_obj = cand
                    continue
                for val in (1.0, 0.0):
                    child = dict(fix)
                    child[j] = val
                    tasks.append((bound, child))
            if pool is not None:
                results = list(pool.map(lambda t: solve_qp_relaxation(rp, t[1]), tasks))
            else:
                results = [solve_qp_relaxation(rp, t[1]) for t in tasks]
            nodes += len(tasks)
            for (parent_bound, child), res in zip(tasks, results):
                if res.status != "optimal":
                    continue
                b = max(res.bound, parent_bound)
                if _is_integral(res.s):
                    cand = _check_candidate(rp, res.s)
                    if cand is not None and cand[1] < inc_obj:
                        inc_s, inc_obj = cand
                    if cand is not None:
                        continue
                if b < prune_level():
                    heapq.heappush(heap, (b, next(counter), child, res))
    finally:
        if pool is not None:
            pool.shutdown()

    open_lb = heap[0][0] if heap and status != "optimal" else math.inf
    global_lb = min(inc_obj, open_lb) if status == "optimal" else min(open_lb, inc_obj)
    if status == "optimal" and inc_s is None:
        return _finish(rp, "infeasible", None, math.inf, math.inf, nodes, start)
    return _finish(rp, status, inc_s, inc_obj, global_lb, nodes, start, gap_tol)


def _finish(rp, status, s, obj, lb, nodes, start, gap_tol=0.0):
    elapsed = time.perf_counter() - start
    if s is None:
        return MiqpSolution(status, None, None, obj, lb, math.inf, nodes, elapsed)
    if status == "optimal":
        lb = min(lb, obj)
        # pruning certifies opt >= obj - gap_tol |obj|
        lb = min(lb, obj - gap_tol * abs(obj)) if gap_tol else lb
    gap = (obj - lb) / max(abs(obj), 1e-300) if obj != lb else 0.0
    if status == "optimal" and gap_tol:
        # obj - gap_tol |obj| can round a hair below the certificate
        gap = min(gap, gap_tol)
    s = np.round(np.asarray(s, dtype=np.float64))
    sw = rp.expand(s) if rp.sample_map is not None else None
    assignment = None
    if rp.problem is not None and sw is not None:
        assignment = rp.problem.assignment_from_sw(sw)
    return MiqpSolution(status, s, sw, float(obj), float(lb), float(gap), nodes, elapsed, assignment)


@dataclass
class BruteForceResult:
    sw: np.ndarray
    objective: float
    feasible: bool
    candidates: int
    feasible_count: int


def _candidate_schedules(windows, N, chunk):
    """Every structurally legal schedule, in blocks of at most ``chunk`` rows."""
    per_window = [[None] + list(range(lo, hi + 1)) for lo, hi in windows]
    block = []
    for choice in itertools.product(*per_window):
        toggles = np.zeros(N + 1, dtype=np.int8)
        for c in choice:
            if c is not None:
                toggles[c] = 1
        block.append(1 - np.cumsum(toggles) % 2)
        if len(block) == chunk:
            yield np.array(block, dtype=np.int8)
            block = []
    if block:
        yield np.array(block, dtype=np.int8)


def brute_force_schedule_search(
    sys: SystemSpec,
    scen: ScenarioSpec,
    windows: SwitchingWindows,
    options: ModelOptions = ModelOptions(),
    max_candidates: int = 1_000_000,
    chunk: int = 4096,
) -> BruteForceResult:
    """Exhaustive search over schedules with at most one switch per window.

    Each candidate's error-inclusive trajectory is simulated directly.  Among
    equal objectives the lexicographically largest ``sw`` (most hi) wins.

    Raises:
        SearchSpaceTooLarge: if the number of candidates exceeds ``max_candidates``.
    """
    N = horizon_samples(scen, sys.h)
    count = 1
    for lo, hi in windows:
        count *= hi - lo + 2
    if count > max_candidates:
        raise SearchSpaceTooLarge(count, max_candidates)
    build_schedule_program(sys, scen, windows, options)  # validates the windows

    _, xss, uss = reference_targets(sys, scen, N)
    if options.cost_coordinates == "deviation":
        xref, uref = xss, uss
    else:
        xref, uref = np.zeros_like(xss), np.zeros_like(uss)
    band_lo, band_hi, mask, _ = band_arrays(scen, sys.h, N)
    symmetric = options.error_sign == "symmetric"
    if symmetric:
        _, gy = error_response(sys, N)
        abs_gy = np.abs(gy)
        y_nom = kernels.error_model_closed_loop(
            sys.A, sys.B, sys.C, sys.K, sys.x0, sys.u0, xss, uss, np.zeros(N + 1)
        )[2]
    else:
        abs_gy = np.zeros((N + 1, sys.q))
        y_nom = np.zeros((N + 1, sys.q))
    feas_tol = FEAS_TOL * max(1.0, float(np.max(np.abs(band_hi)[mask], initial=0.0)))

    best = None
    n_feasible = 0
    for sw in _candidate_schedules(windows, N, chunk):
        obj, feas = kernels.evaluate_schedules(
            sw, scen.e_lo, scen.e_hi, sys.A, sys.B, sys.C, sys.K, sys.x0, sys.u0, xss, uss,
            xref, uref, sys.Q, sys.R, scen.t_lo, scen.t_hi, options.w1, options.w2,
            band_lo, band_hi, mask, symmetric, y_nom, abs_gy, feas_tol,
        )
        n_feasible += int(feas.sum())
        for k in np.flatnonzero(feas):
            cand = (obj[k], tuple(-int(v) for v in sw[k]))
            if best is None or cand < best[0]:
                best = (cand, sw[k].copy())
    if best is None:
        return BruteForceResult(None, math.inf, False, count, 0)
    return BruteForceResult(best[1], float(best[0][0]), True, count, n_feasible)
