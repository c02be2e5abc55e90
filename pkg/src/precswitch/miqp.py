"""Mixed-integer quadratic program for precision-switching schedules.

Variables, per sample ``i = 0..N``:

* ``sw_i``  binary, 1 = hi precision, 0 = lo precision
* ``chi_i`` binary, ``sw_{i-1} XOR sw_i`` for every sample inside a switching window
* ``e_i``   roundoff injected at sample ``i >= 1``: ``e_lo (1 - sw_i) + e_hi sw_i``
* ``x_i, u_i, y_i`` the error-inclusive closed-loop trajectory

All constraints are linear; the objective ``w1 * runtime + w2 * LQR cost`` is a
convex quadratic.  Because the trajectory is affine in ``sw``, :func:`presolve`
eliminates it exactly and leaves a dense QP over the free binaries only.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .intervals import SwitchingWindows, validate_windows
from .lti import (
    ScenarioSpec,
    SystemSpec,
    band_arrays,
    horizon_samples,
    reference_targets,
)

__all__ = [
    "ModelOptions",
    "MiqpProblem",
    "ReducedProblem",
    "PresolveInfeasible",
    "encode_xor",
    "build_schedule_program",
    "presolve",
    "error_response",
]

ERROR_SIGNS = ("positive", "symmetric")
COST_COORDINATES = ("deviation", "raw")


@dataclass(frozen=True)
class ModelOptions:
    """Objective weights and modelling switches.

    ``error_sign="symmetric"`` checks the band against ``+-e`` by widening it
    with the worst-case error response; the objective always uses ``+e``.
    """

    w1: float = 1.0
    w2: float = 1.0
    error_sign: str = "positive"
    cost_coordinates: str = "deviation"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("objective weights must be non-negative")
        if self.error_sign not in ERROR_SIGNS:
            raise ValueError(f"error_sign must be one of {ERROR_SIGNS}")
        if self.cost_coordinates not in COST_COORDINATES:
            raise ValueError(f"cost_coordinates must be one of {COST_COORDINATES}")


def encode_xor(a: int, b: int, chi: int):
    """Linear rows forcing ``chi = a XOR b`` at binary points.

    Returns four ``(coefficients, rhs)`` pairs meaning ``coefficients . v <= rhs``
    over the variable indices ``a``, ``b``, ``chi``::

        chi >= a - b,  chi >= b - a,  chi <= 2 - (a + b),  chi <= a + b
    """
    return [
        ({a: 1.0, b: -1.0, chi: -1.0}, 0.0),
        ({a: -1.0, b: 1.0, chi: -1.0}, 0.0),
        ({a: 1.0, b: 1.0, chi: 1.0}, 2.0),
        ({a: -1.0, b: -1.0, chi: 1.0}, 0.0),
    ]


def error_response(sys: SystemSpec, N: int):
    """Response of ``(x, u)`` and ``y`` to a unit error injected at one sample.

    Row ``d`` is the deviation ``d`` samples after the injection.
    """
    M = sys.closed_loop_matrix()
    nz = sys.n + sys.m
    gz = np.empty((N + 1, nz))
    g = np.ones(nz)
    for d in range(N + 1):
        gz[d] = g
        g = M @ g
    gy = gz[:, : sys.n] @ sys.C.T
    gy[0] += 1.0
    return gz, gy


class _Rows:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []
        self.lo, self.hi, self.kind, self.sample = [], [], [], []

    def add(self, coeffs, lo, hi, kind, sample):
        r = len(self.lo)
        for c, v in coeffs.items():
            if v != 0.0:
                self.rows.append(r)
                self.cols.append(c)
                self.vals.append(v)
        self.lo.append(lo)
        self.hi.append(hi)
        self.kind.append(kind)
        self.sample.append(sample)

    def add_dense(self, cols, vals, lo, hi, kind, sample):
        r = len(self.lo)
        keep = vals != 0.0
        self.rows.extend([r] * int(keep.sum()))
        self.cols.extend(np.asarray(cols)[keep].tolist())
        self.vals.extend(np.asarray(vals)[keep].tolist())
        self.lo.append(lo)
        self.hi.append(hi)
        self.kind.append(kind)
        self.sample.append(sample)


@dataclass(frozen=True, eq=False)
class MiqpProblem:
    """Explicit MIQP: ``min c0 + c.v + 1/2 v'Pv`` s.t. ``row_lo <= A v <= row_hi``, bounds, integrality."""

    sys: SystemSpec
    scen: ScenarioSpec
    windows: SwitchingWindows
    options: ModelOptions
    N: int
    offsets: dict
    chi_samples: tuple
    names: tuple
    is_binary: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    row_kind: np.ndarray
    row_sample: np.ndarray
    c0: float
    c: np.ndarray
    P: sp.csr_matrix
    xref: np.ndarray = field(repr=False, default=None)
    uref: np.ndarray = field(repr=False, default=None)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    def sw_index(self, i: int) -> int:
        return self.offsets["sw"] + i

    def e_index(self, i: int) -> int:
        return self.offsets["e"] + i - 1

    def x_index(self, i: int, c: int) -> int:
        return self.offsets["x"] + i * self.sys.n + c

    def u_index(self, i: int, c: int) -> int:
        return self.offsets["u"] + i * self.sys.m + c

    def y_index(self, i: int, c: int) -> int:
        return self.offsets["y"] + i * self.sys.q + c

    def count_rows(self, kind: str) -> int:
        return int(np.sum(self.row_kind == kind))

    def without_rows(self, kinds) -> "MiqpProblem":
        """Copy with every row of the given kinds removed."""
        from dataclasses import replace

        keep = ~np.isin(self.row_kind, list(kinds))
        return replace(
            self,
            A=self.A[keep],
            row_lo=self.row_lo[keep],
            row_hi=self.row_hi[keep],
            row_kind=self.row_kind[keep],
            row_sample=self.row_sample[keep],
        )

    def objective(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        return float(self.c0 + self.c @ v + 0.5 * v @ (self.P @ v))

    def max_residual(self, v) -> float:
        """Largest violation over all rows, variable bounds and integrality."""
        v = np.asarray(v, dtype=np.float64)
        Av = self.A @ v
        worst = max(
            float(np.max(self.row_lo - Av, initial=0.0)),
            float(np.max(Av - self.row_hi, initial=0.0)),
            float(np.max(self.lb - v, initial=0.0)),
            float(np.max(v - self.ub, initial=0.0)),
        )
        vb = v[self.is_binary]
        if vb.size:
            worst = max(worst, float(np.max(np.abs(vb - np.round(vb)))))
        return worst

    def assemble(self, sw, chi, e, x, u, y) -> np.ndarray:
        v = np.zeros(self.n_vars)
        o = self.offsets
        N = self.N
        v[o["sw"] : o["sw"] + N + 1] = sw
        v[o["chi"] : o["chi"] + len(self.chi_samples)] = chi
        v[o["e"] : o["e"] + N] = e[1:]
        v[o["x"] : o["x"] + x.size] = np.ravel(x)
        v[o["u"] : o["u"] + u.size] = np.ravel(u)
        v[o["y"] : o["y"] + y.size] = np.ravel(y)
        return v

    def assignment_from_sw(self, sw) -> np.ndarray:
        """Full variable vector induced by a 0/1 (or relaxed) switching vector."""
        sw = np.asarray(sw, dtype=np.float64)
        scen = self.scen
        e = scen.e_lo + (scen.e_hi - scen.e_lo) * sw
        e[0] = 0.0
        x, u, y = _simulate_error_model(self.sys, self.xref_targets, self.uref_targets, e)
        chi = np.array([abs(sw[i] - sw[i - 1]) for i in self.chi_samples])
        return self.assemble(sw, chi, e, x, u, y)

    @property
    def xref_targets(self):
        return self._targets()[0]

    @property
    def uref_targets(self):
        return self._targets()[1]

    def _targets(self):
        cache = self.__dict__.get("_target_cache")
        if cache is None:
            _, xss, uss = reference_targets(self.sys, self.scen, self.N)
            cache = (xss, uss)
            object.__setattr__(self, "_target_cache", cache)
        return cache

    def export_text(self) -> str:
        """Plain-text dump: variables, constraint rows and objective triplets.

        Format (one record per line, fields separated by single spaces)::

            VARIABLES <count>
            <index> <name> <B|C> <lb> <ub>
            CONSTRAINTS <count>
            <index> <kind> <sample> <lo> <hi> <nnz> <col>:<coef> ...
            OBJECTIVE_CONSTANT <c0>
            LINEAR <nnz>
            <col> <coef>
            QUADRATIC <nnz>          # objective term 1/2 * v' P v
            <row> <col> <value>
        """
        out = io.StringIO()
        out.write(f"VARIABLES {self.n_vars}\n")
        for j, name in enumerate(self.names):
            kind = "B" if self.is_binary[j] else "C"
            out.write(f"{j} {name} {kind} {float(self.lb[j])!r} {float(self.ub[j])!r}\n")
        A = self.A.tocsr()
        out.write(f"CONSTRAINTS {A.shape[0]}\n")
        for r in range(A.shape[0]):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            terms = " ".join(f"{c}:{float(v)!r}" for c, v in zip(A.indices[lo:hi], A.data[lo:hi]))
            out.write(
                f"{r} {self.row_kind[r]} {self.row_sample[r]} {float(self.row_lo[r])!r} {float(self.row_hi[r])!r} "
                f"{hi - lo} {terms}\n"
            )
        out.write(f"OBJECTIVE_CONSTANT {float(self.c0)!r}\n")
        nz = np.flatnonzero(self.c)
        out.write(f"LINEAR {nz.size}\n")
        for j in nz:
            out.write(f"{j} {float(self.c[j])!r}\n")
        P = self.P.tocoo()
        out.write(f"QUADRATIC {P.nnz}\n")
        order = np.lexsort((P.col, P.row))
        for k in order:
            out.write(f"{P.row[k]} {P.col[k]} {float(P.data[k])!r}\n")
        return out.getvalue()


def _simulate_error_model(sys: SystemSpec, xss, uss, e):
    return kernels.error_model_closed_loop(
        np.ascontiguousarray(sys.A),
        np.ascontiguousarray(sys.B),
        np.ascontiguousarray(sys.C),
        np.ascontiguousarray(sys.K),
        np.ascontiguousarray(sys.x0),
        np.ascontiguousarray(sys.u0),
        np.ascontiguousarray(xss),
        np.ascontiguousarray(uss),
        np.ascontiguousarray(e, dtype=np.float64),
    )


def build_schedule_program(
    sys: SystemSpec,
    scen: ScenarioSpec,
    windows: SwitchingWindows,
    options: ModelOptions = ModelOptions(),
) -> MiqpProblem:
    """Encode the schedule synthesis problem with purely linear constraints.

    Raises:
        ValueError: if the windows are unordered, overlapping or reach past ``N``.
    """
    N = horizon_samples(scen, sys.h)
    problems = validate_windows(windows, N)
    if problems:
        raise ValueError("invalid switching windows: " + "; ".join(problems))
    n, m, q = sys.n, sys.m, sys.q
    _, xss, uss = reference_targets(sys, scen, N)
    chi_samples = tuple(i for lo, hi in windows for i in range(lo, hi + 1))

    offsets = {}
    names = []
    offsets["sw"] = 0
    names += [f"sw_{i}" for i in range(N + 1)]
    offsets["chi"] = len(names)
    names += [f"chi_{i}" for i in chi_samples]
    offsets["e"] = len(names)
    names += [f"e_{i}" for i in range(1, N + 1)]
    offsets["x"] = len(names)
    names += [f"x_{i}_{c}" for i in range(N + 1) for c in range(n)]
    offsets["u"] = len(names)
    names += [f"u_{i}_{c}" for i in range(N + 1) for c in range(m)]
    offsets["y"] = len(names)
    names += [f"y_{i}_{c}" for i in range(N + 1) for c in range(q)]
    nv = len(names)

    is_binary = np.zeros(nv, dtype=bool)
    is_binary[: offsets["e"]] = True
    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[: offsets["e"]] = 0.0
    ub[: offsets["e"]] = 1.0

    SW = lambda i: offsets["sw"] + i  # noqa: E731
    E = lambda i: offsets["e"] + i - 1  # noqa: E731
    X = lambda i, c: offsets["x"] + i * n + c  # noqa: E731
    U = lambda i, c: offsets["u"] + i * m + c  # noqa: E731
    Y = lambda i, c: offsets["y"] + i * q + c  # noqa: E731
    chi_of = {i: offsets["chi"] + k for k, i in enumerate(chi_samples)}

    rows = _Rows()
    first_window = windows[0][0] if len(windows) else N + 1
    for i in range(min(first_window, N + 1)):
        rows.add({SW(i): 1.0}, 1.0, 1.0, "fix", i)

    for b, (lo, hi) in enumerate(windows):
        for i in range(lo, hi + 1):
            for coeffs, rhs in encode_xor(SW(i - 1), SW(i), chi_of[i]):
                rows.add(coeffs, -np.inf, rhs, "xor", i)
        rows.add({chi_of[i]: 1.0 for i in range(lo, hi + 1)}, -np.inf, 1.0, "card", lo)
        nxt = windows[b + 1][0] if b + 1 < len(windows) else N + 1
        for i in range(hi + 1, nxt):
            rows.add({SW(i): 1.0, SW(hi): -1.0}, 0.0, 0.0, "freeze", i)

    de = scen.e_hi - scen.e_lo
    for i in range(1, N + 1):
        rows.add({E(i): 1.0, SW(i): -de}, scen.e_lo, scen.e_lo, "err", i)

    for c in range(n):
        rows.add({X(0, c): 1.0}, sys.x0[c], sys.x0[c], "init", 0)
    for c in range(m):
        rows.add({U(0, c): 1.0}, sys.u0[c], sys.u0[c], "init", 0)
    for c in range(q):
        coeffs = {Y(0, c): 1.0}
        for j in range(n):
            coeffs[X(0, j)] = coeffs.get(X(0, j), 0.0) - sys.C[c, j]
        rows.add(coeffs, 0.0, 0.0, "dyn_y", 0)

    for i in range(1, N + 1):
        for c in range(n):
            coeffs = {X(i, c): 1.0, E(i): -1.0}
            for j in range(n):
                coeffs[X(i - 1, j)] = -sys.A[c, j]
            for j in range(m):
                coeffs[U(i - 1, j)] = -sys.B[c, j]
            rows.add(coeffs, 0.0, 0.0, "dyn_x", i)
        for c in range(m):
            coeffs = {U(i, c): 1.0, E(i): -1.0}
            for j in range(n):
                coeffs[X(i - 1, j)] = -sys.K[c, j]
            rhs = float(uss[i, c] - sys.K[c] @ xss[i])
            rows.add(coeffs, rhs, rhs, "dyn_u", i)
        for c in range(q):
            coeffs = {Y(i, c): 1.0, E(i): -1.0}
            for j in range(n):
                coeffs[X(i, j)] = coeffs.get(X(i, j), 0.0) - sys.C[c, j]
            rows.add(coeffs, 0.0, 0.0, "dyn_y", i)

    band_lo, band_hi, mask, _ = band_arrays(scen, sys.h, N)
    if options.error_sign == "positive":
        for i in np.flatnonzero(mask):
            for c in range(q):
                rows.add({Y(i, c): 1.0}, band_lo[i, c], band_hi[i, c], "band", int(i))
    else:
        _, gy = error_response(sys, N)
        y_nom = _simulate_error_model(sys, xss, uss, np.zeros(N + 1))[2]
        abs_gy = np.abs(gy)
        for i in np.flatnonzero(mask):
            cols = [E(k) for k in range(1, i + 1)]
            for c in range(q):
                w = abs_gy[i - np.arange(1, i + 1), c]
                # y_nom + rho <= hi  and  y_nom - rho >= lo
                rows.add_dense(cols, w, -np.inf, band_hi[i, c] - y_nom[i, c], "band", int(i))
                rows.add_dense(cols, w, -np.inf, y_nom[i, c] - band_lo[i, c], "band", int(i))

    A = sp.csr_matrix(
        (rows.vals, (rows.rows, rows.cols)), shape=(len(rows.lo), nv), dtype=np.float64
    )

    # objective
    c = np.zeros(nv)
    # runtime counts the N controller executions; sample 0 is the initial condition
    c0 = options.w1 * N * scen.t_lo
    c[offsets["sw"] + 1 : offsets["sw"] + N + 1] = options.w1 * (scen.t_hi - scen.t_lo)
    if options.cost_coordinates == "deviation":
        xref, uref = xss, uss
    else:
        xref, uref = np.zeros_like(xss), np.zeros_like(uss)
    w2 = options.w2
    Pblocks = []
    for i in range(N + 1):
        c[X(i, 0) : X(i, 0) + n] = -2.0 * w2 * (sys.Q @ xref[i])
        c[U(i, 0) : U(i, 0) + m] = -2.0 * w2 * (sys.R @ uref[i])
        c0 += w2 * float(xref[i] @ sys.Q @ xref[i] + uref[i] @ sys.R @ uref[i])
    Pxx = sp.kron(sp.eye(N + 1), sp.csr_matrix(2.0 * w2 * sys.Q))
    Puu = sp.kron(sp.eye(N + 1), sp.csr_matrix(2.0 * w2 * sys.R))
    Pblocks = sp.block_diag(
        [sp.csr_matrix((offsets["x"], offsets["x"])), Pxx, Puu, sp.csr_matrix(((N + 1) * q, (N + 1) * q))]
    )
    P = sp.csr_matrix(Pblocks)
    P.eliminate_zeros()

    problem = MiqpProblem(
        sys=sys,
        scen=scen,
        windows=windows,
        options=options,
        N=N,
        offsets=offsets,
        chi_samples=chi_samples,
        names=tuple(names),
        is_binary=is_binary,
        lb=lb,
        ub=ub,
        A=A,
        row_lo=np.asarray(rows.lo, dtype=np.float64),
        row_hi=np.asarray(rows.hi, dtype=np.float64),
        row_kind=np.asarray(rows.kind),
        row_sample=np.asarray(rows.sample, dtype=np.int64),
        c0=float(c0),
        c=c,
        P=P,
        xref=xref,
        uref=uref,
    )
    object.__setattr__(problem, "_target_cache", (xss, uss))
    return problem


class PresolveInfeasible(Exception):
    pass


# references used by the XOR pairs of a reduced problem
CONST_ZERO = -1
CONST_ONE = -2


@dataclass(eq=False)
class ReducedProblem:
    """Dense QP over free binaries ``s``: ``min c0 + g.s + 1/2 s'Hs``.

    Subject to ``G s <= hb`` (band rows) and, for every window group, the XOR
    linearisation of the pairs ``(a, b)`` with ``sum chi <= 1``.  A pair entry
    is a free-binary index or one of ``CONST_ZERO`` / ``CONST_ONE``.

    ``sample_map[i]`` names the free binary that ``sw_i`` equals, or -1 when
    ``sw_i`` is the constant ``sample_const[i]``.
    """

    H: np.ndarray
    g: np.ndarray
    c0: float
    G: np.ndarray
    hb: np.ndarray
    pairs: list
    groups: list
    sample_map: np.ndarray = None
    sample_const: np.ndarray = None
    row_info: list = field(default_factory=list)
    problem: MiqpProblem = None
    status: str = "ok"
    reason: str = ""

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        F = self.g.shape[0]
        G = np.asarray(self.G, dtype=np.float64)
        self.G = G if G.ndim == 2 else G.reshape(-1, F) if G.size else np.zeros((0, F))
        self.hb = np.asarray(self.hb, dtype=np.float64).reshape(-1)
        self.pairs = [tuple(int(v) for v in p) for p in self.pairs]
        self.groups = [list(map(int, grp)) for grp in self.groups]

    @property
    def n_free(self) -> int:
        return self.g.shape[0]

    def objective(self, s) -> float:
        s = np.asarray(s, dtype=np.float64)
        return float(self.c0 + self.g @ s + 0.5 * s @ self.H @ s)

    def gradient(self, s) -> np.ndarray:
        return self.H @ np.asarray(s, dtype=np.float64) + self.g

    def pair_values(self, s):
        s = np.asarray(s, dtype=np.float64)

        def val(ref):
            if ref == CONST_ZERO:
                return 0.0
            if ref == CONST_ONE:
                return 1.0
            return s[ref]

        return [(val(a), val(b)) for a, b in self.pairs]

    def violation(self, s) -> float:
        """Largest violation of the band rows and one-switch-per-window rows at binary ``s``."""
        s = np.asarray(s, dtype=np.float64)
        worst = 0.0
        if self.G.shape[0]:
            worst = max(worst, float(np.max(self.G @ s - self.hb)))
        pv = self.pair_values(s)
        for grp in self.groups:
            worst = max(worst, sum(abs(pv[p][0] - pv[p][1]) for p in grp) - 1.0)
        return max(worst, 0.0)

    def expand(self, s) -> np.ndarray:
        """Switching vector ``sw_0..sw_N`` for a free-binary assignment."""
        s = np.asarray(s, dtype=np.float64)
        out = np.array(self.sample_const, dtype=np.float64)
        free = self.sample_map >= 0
        out[free] = s[self.sample_map[free]]
        return out

    def all_hi(self) -> np.ndarray:
        return np.ones(self.n_free)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _runs(samples):
    samples = sorted(samples)
    runs = []
    start = prev = samples[0]
    for s in samples[1:]:
        if s != prev + 1:
            runs.append((start, prev))
            start = s
        prev = s
    runs.append((start, prev))
    return runs


def _shifted_sum(prefix, runs, N):
    """``sum_{i in runs, i >= 1} R[k - i]`` for ``k = 0..N`` from the prefix sums of ``R``."""
    out = np.zeros((N + 1,) + prefix.shape[1:])
    for a, b in runs:
        a = max(a, 1)
        if a > b:
            continue
        k = np.arange(a, N + 1)
        out[a:] += prefix[k - a]
        tail = k - b - 1
        ok = tail >= 0
        out[a:][ok] -= prefix[tail[ok]]
    return out


def presolve(p: MiqpProblem) -> ReducedProblem:
    """Eliminate fixed and chained switching variables, ``e`` and the trajectory.

    The reduced problem has one free binary per equivalence class of ``sw``
    variables that is not fixed; with windows built by
    :func:`build_schedule_program` that is one per in-window sample.
    Contradictions found here produce ``status="infeasible"``.
    """
    sys, scen, N = p.sys, p.scen, p.N
    n, m, q = sys.n, sys.m, sys.q
    sw0 = p.offsets["sw"]
    A = p.A.tocsr()
    uf = _UnionFind(N + 1)
    fixed = {}
    reasons = []

    def row_terms(r):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        return A.indices[lo:hi], A.data[lo:hi]

    for r in np.flatnonzero(p.row_kind == "freeze"):
        cols, vals = row_terms(r)
        a, b = (int(c) - sw0 for c in cols)
        uf.union(a, b)
    fix_rows = np.flatnonzero(p.row_kind == "fix")
    for r in fix_rows:
        cols, vals = row_terms(r)
        i = int(cols[0]) - sw0
        val = p.row_lo[r] / vals[0]
        if val not in (0.0, 1.0):
            reasons.append(f"sw_{i} fixed to non-binary value {val}")
            continue
        if fixed.get(i, val) != val:
            reasons.append(f"sw_{i} fixed to both 0 and 1")
        fixed[i] = val
    class_value = {}
    for i, val in sorted(fixed.items()):
        root = uf.find(i)
        if class_value.get(root, val) != val:
            reasons.append(f"switching class of sw_{root} fixed to both 0 and 1")
        class_value[root] = val

    roots = sorted({uf.find(i) for i in range(N + 1)})
    free_roots = [rt for rt in roots if rt not in class_value]
    free_index = {rt: f for f, rt in enumerate(free_roots)}
    sample_map = np.full(N + 1, -1, dtype=np.int64)
    sample_const = np.zeros(N + 1)
    members = {rt: [] for rt in free_roots}
    for i in range(N + 1):
        rt = uf.find(i)
        if rt in class_value:
            sample_const[i] = class_value[rt]
        else:
            sample_map[i] = free_index[rt]
            members[rt].append(i)
    F = len(free_roots)

    # XOR pairs and cardinality groups
    chi0 = p.offsets["chi"]
    n_chi = len(p.chi_samples)
    pair_of_chi = {}
    for r in np.flatnonzero(p.row_kind == "xor"):
        cols, _ = row_terms(r)
        chis = [int(c) for c in cols if chi0 <= c < chi0 + n_chi]
        sws = sorted(int(c) - sw0 for c in cols if sw0 <= c < sw0 + N + 1)
        if len(chis) == 1 and len(sws) == 2 and chis[0] not in pair_of_chi:
            pair_of_chi[chis[0]] = tuple(sws)

    def ref(i):
        if sample_map[i] >= 0:
            return int(sample_map[i])
        return CONST_ONE if sample_const[i] == 1.0 else CONST_ZERO

    chi_cols = sorted(pair_of_chi)
    pair_pos = {c: k for k, c in enumerate(chi_cols)}
    pairs = [(ref(pair_of_chi[c][0]), ref(pair_of_chi[c][1])) for c in chi_cols]
    groups = []
    for r in np.flatnonzero(p.row_kind == "card"):
        cols, _ = row_terms(r)
        groups.append([pair_pos[int(c)] for c in cols if int(c) in pair_pos])

    # affine trajectory in s
    de = scen.e_hi - scen.e_lo
    e_base = scen.e_lo + de * sample_const
    e_base[sample_map >= 0] = scen.e_lo
    e_base[0] = 0.0
    xss, uss = p.xref_targets, p.uref_targets
    x0, u0, y0 = _simulate_error_model(sys, xss, uss, e_base)
    gz, gy = error_response(sys, N)
    pz = np.cumsum(gz, axis=0)
    py = np.cumsum(gy, axis=0)
    Jz = np.zeros((N + 1, n + m, F))
    Jy = np.zeros((N + 1, q, F))
    counts = np.zeros(F)
    runs_of = []
    for rt in free_roots:
        f = free_index[rt]
        runs = _runs(members[rt])
        runs_of.append(runs)
        counts[f] = sum(1 for i in members[rt] if i >= 1)
        Jz[:, :, f] = de * _shifted_sum(pz, runs, N)
        Jy[:, :, f] = de * _shifted_sum(py, runs, N)

    W = np.zeros((n + m, n + m))
    W[:n, :n] = sys.Q
    W[n:, n:] = sys.R
    d0 = np.hstack([x0 - p.xref, u0 - p.uref])
    opt = p.options
    Jflat = Jz.reshape((N + 1) * (n + m), F)
    WJ = np.einsum("ab,kbf->kaf", W, Jz).reshape((N + 1) * (n + m), F)
    H = 2.0 * opt.w2 * (Jflat.T @ WJ)
    H = 0.5 * (H + H.T)
    g = 2.0 * opt.w2 * (WJ.T @ d0.ravel()) + opt.w1 * (scen.t_hi - scen.t_lo) * counts
    t_const = scen.t_lo + (scen.t_hi - scen.t_lo) * sample_const
    t_const[sample_map >= 0] = scen.t_lo
    c0 = opt.w2 * float(np.einsum("ka,ab,kb->", d0, W, d0)) + opt.w1 * float(np.sum(t_const[1:]))

    # band rows
    G_rows, hb, info = [], [], []
    band_rows = np.flatnonzero(p.row_kind == "band")
    y_col0 = p.offsets["y"]
    if opt.error_sign == "positive":
        for r in band_rows:
            cols, _ = row_terms(r)
            i = int(p.row_sample[r])
            c = int(cols[0]) - y_col0 - i * q
            for sign, bound in ((1.0, p.row_hi[r]), (-1.0, -p.row_lo[r])):
                if not np.isfinite(bound):
                    continue
                G_rows.append(sign * Jy[i, c])
                hb.append(bound - sign * y0[i, c])
                info.append((i, c, "hi" if sign > 0 else "lo"))
    else:
        e_col0 = p.offsets["e"]
        for r in band_rows:
            cols, vals = row_terms(r)
            i = int(p.row_sample[r])
            # rho(e) = vals . e, e = e_base + de * (sample_map -> s)
            samples = cols - e_col0 + 1
            row = np.zeros(F)
            const = float(vals @ e_base[samples])
            sm = sample_map[samples]
            free = sm >= 0
            np.add.at(row, sm[free], de * vals[free])
            G_rows.append(row)
            hb.append(p.row_hi[r] - const)
            info.append((i, -1, "widened"))
    G = np.array(G_rows, dtype=np.float64).reshape(len(G_rows), F)
    hb = np.array(hb, dtype=np.float64)

    keep = np.any(G != 0.0, axis=1) if G.size else np.zeros(0, dtype=bool)
    scale = np.maximum(1.0, np.abs(hb))
    for r in np.flatnonzero(~keep):
        if hb[r] < -1e-9 * scale[r]:
            i, c, side = info[r]
            reasons.append(f"band constraint at sample {i} ({side}) violated for every schedule")
    G = G[keep] if G.size else np.zeros((0, F))
    hb = hb[keep] if hb.size else np.zeros(0)
    info = [row for row, k in zip(info, keep) if k]

    rp = ReducedProblem(
        H=H,
        g=g,
        c0=c0,
        G=G,
        hb=hb,
        pairs=pairs,
        groups=groups,
        sample_map=sample_map,
        sample_const=sample_const,
        row_info=info,
        problem=p,
        status="infeasible" if reasons else "ok",
        reason="; ".join(reasons),
    )
    return rp
