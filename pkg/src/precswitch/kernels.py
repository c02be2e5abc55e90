"""Hot numeric loops.

Every kernel here is written in the numba-compatible subset of Python and is
compiled with ``numba.njit`` unless ``PRECSWITCH_DISABLE_JIT`` is set, in which
case the same source runs under CPython (and ``round_array`` switches to a
vectorised numpy implementation).

Loop order is part of the contract: dot products are accumulated row-major,
left to right, so the jitted and interpreted paths agree bit for bit.
"""

import math

import numpy as np

from ._jit import JIT_ENABLED, maybe_njit

__all__ = [
    "JIT_ENABLED",
    "round_scalar",
    "round_array",
    "rounded_closed_loop",
    "error_model_closed_loop",
    "stage_costs",
    "evaluate_schedules",
]


@maybe_njit
def round_scalar(v, p, emin, emax):
    """Round ``v`` to nearest-even in a binary format with ``p`` significand bits."""
    if p >= 53 and emin <= -1022 and emax >= 1023:
        return v
    if v == 0.0 or not math.isfinite(v):
        return v
    _, e = math.frexp(v)
    ex = e - 1
    if ex < emin:
        ex = emin
    quantum = math.ldexp(1.0, int(ex - p + 1))
    r = np.rint(v / quantum) * quantum
    max_finite = math.ldexp(2.0 - math.ldexp(1.0, int(1 - p)), int(emax))
    if abs(r) > max_finite:
        return math.copysign(math.inf, v)
    return r


@maybe_njit
def _round_array_loop(values, p, emin, emax):
    out = np.empty_like(values)
    flat_in = values.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = round_scalar(flat_in[i], p, emin, emax)
    return out


def _round_array_numpy(values, p, emin, emax):
    v = np.asarray(values, dtype=np.float64)
    out = v.copy()
    if p >= 53 and emin <= -1022 and emax >= 1023:
        return out
    mask = np.isfinite(v) & (v != 0.0)
    w = v[mask]
    _, e = np.frexp(w)
    ex = np.maximum(e - 1, emin)
    quantum = np.ldexp(1.0, ex - p + 1)
    r = np.rint(w / quantum) * quantum
    max_finite = math.ldexp(2.0 - math.ldexp(1.0, 1 - p), emax)
    out[mask] = np.where(np.abs(r) > max_finite, np.copysign(np.inf, w), r)
    return out


def round_array(values, p, emin, emax):
    """Elementwise :func:`round_scalar` over an array of float64 values."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if JIT_ENABLED:
        return _round_array_loop(v, int(p), int(emin), int(emax))
    return _round_array_numpy(v, int(p), int(emin), int(emax))


@maybe_njit
def rounded_closed_loop(A, B, C, K, x0, u0, xss, uss, fmt):
    """Closed-loop recursion with every scalar operation rounded.

    ``fmt[k] = (p, emin, emax)`` selects the arithmetic of sample ``k``.
    ``xss[k]``/``uss[k]`` are the steady-state targets active at sample ``k``.
    """
    n = A.shape[0]
    m = B.shape[1]
    q = C.shape[0]
    N = fmt.shape[0] - 1
    x = np.empty((N + 1, n))
    u = np.empty((N + 1, m))
    y = np.empty((N + 1, q))
    x[0, :] = x0
    u[0, :] = u0
    p, lo, hi = fmt[0, 0], fmt[0, 1], fmt[0, 2]
    for i in range(q):
        acc = round_scalar(C[i, 0] * x[0, 0], p, lo, hi)
        for j in range(1, n):
            acc = round_scalar(acc + round_scalar(C[i, j] * x[0, j], p, lo, hi), p, lo, hi)
        y[0, i] = acc
    for k in range(1, N + 1):
        p, lo, hi = fmt[k, 0], fmt[k, 1], fmt[k, 2]
        for i in range(m):
            acc = 0.0
            for j in range(n):
                d = round_scalar(x[k - 1, j] - xss[k, j], p, lo, hi)
                t = round_scalar(K[i, j] * d, p, lo, hi)
                acc = t if j == 0 else round_scalar(acc + t, p, lo, hi)
            u[k, i] = round_scalar(uss[k, i] + acc, p, lo, hi)
        for i in range(n):
            acc = round_scalar(A[i, 0] * x[k - 1, 0], p, lo, hi)
            for j in range(1, n):
                acc = round_scalar(acc + round_scalar(A[i, j] * x[k - 1, j], p, lo, hi), p, lo, hi)
            for j in range(m):
                acc = round_scalar(acc + round_scalar(B[i, j] * u[k - 1, j], p, lo, hi), p, lo, hi)
            x[k, i] = acc
        for i in range(q):
            acc = round_scalar(C[i, 0] * x[k, 0], p, lo, hi)
            for j in range(1, n):
                acc = round_scalar(acc + round_scalar(C[i, j] * x[k, j], p, lo, hi), p, lo, hi)
            y[k, i] = acc
    return x, u, y


@maybe_njit
def error_model_closed_loop(A, B, C, K, x0, u0, xss, uss, e):
    """Exact-arithmetic recursion with ``e[k]`` added to every x, u, y entry of sample k.

    ``e[0]`` is ignored: the initial state and input are given.  With ``e`` all
    zero this reproduces :func:`rounded_closed_loop` at binary64 bit for bit.
    """
    n = A.shape[0]
    m = B.shape[1]
    q = C.shape[0]
    N = e.shape[0] - 1
    x = np.empty((N + 1, n))
    u = np.empty((N + 1, m))
    y = np.empty((N + 1, q))
    x[0, :] = x0
    u[0, :] = u0
    for i in range(q):
        acc = C[i, 0] * x[0, 0]
        for j in range(1, n):
            acc = acc + C[i, j] * x[0, j]
        y[0, i] = acc
    for k in range(1, N + 1):
        ek = e[k]
        for i in range(m):
            acc = 0.0
            for j in range(n):
                t = K[i, j] * (x[k - 1, j] - xss[k, j])
                acc = t if j == 0 else acc + t
            u[k, i] = (uss[k, i] + acc) + ek
        for i in range(n):
            acc = A[i, 0] * x[k - 1, 0]
            for j in range(1, n):
                acc = acc + A[i, j] * x[k - 1, j]
            for j in range(m):
                acc = acc + B[i, j] * u[k - 1, j]
            x[k, i] = acc + ek
        for i in range(q):
            acc = C[i, 0] * x[k, 0]
            for j in range(1, n):
                acc = acc + C[i, j] * x[k, j]
            y[k, i] = acc + ek
    return x, u, y


@maybe_njit
def stage_costs(x, u, xref, uref, Q, R):
    """Per-sample quadratic cost (x-xref)'Q(x-xref) + (u-uref)'R(u-uref)."""
    N1, n = x.shape
    m = u.shape[1]
    out = np.empty(N1)
    dx = np.empty(n)
    du = np.empty(m)
    for k in range(N1):
        for i in range(n):
            dx[i] = x[k, i] - xref[k, i]
        for i in range(m):
            du[i] = u[k, i] - uref[k, i]
        s = 0.0
        for i in range(n):
            row = 0.0
            for j in range(n):
                row += Q[i, j] * dx[j]
            s += dx[i] * row
        for i in range(m):
            row = 0.0
            for j in range(m):
                row += R[i, j] * du[j]
            s += du[i] * row
        out[k] = s
    return out


@maybe_njit
def evaluate_schedules(
    sw,
    e_lo,
    e_hi,
    A,
    B,
    C,
    K,
    x0,
    u0,
    xss,
    uss,
    xref,
    uref,
    Q,
    R,
    t_lo,
    t_hi,
    w1,
    w2,
    band_lo,
    band_hi,
    constrained,
    symmetric,
    y_nom,
    abs_gy,
    feas_tol,
):
    """Objective and band feasibility of every 0/1 schedule row in ``sw``.

    Runtime is summed over samples ``1..N``; sample 0 is the given initial condition.

    In symmetric mode the band is checked on ``y_nom`` widened by the
    worst-case error response ``sum_i |abs_gy[k - i]| * e_i``.
    """
    n_cand, N1 = sw.shape
    q = C.shape[0]
    obj = np.empty(n_cand)
    feasible = np.empty(n_cand, dtype=np.bool_)
    e = np.empty(N1)
    for c in range(n_cand):
        z1 = 0.0
        for k in range(N1):
            if sw[c, k] != 0:
                e[k] = e_hi
                if k > 0:
                    z1 += t_hi
            else:
                e[k] = e_lo
                if k > 0:
                    z1 += t_lo
        x, u, y = error_model_closed_loop(A, B, C, K, x0, u0, xss, uss, e)
        z2 = 0.0
        costs = stage_costs(x, u, xref, uref, Q, R)
        for k in range(N1):
            z2 += costs[k]
        obj[c] = w1 * z1 + w2 * z2
        ok = True
        for k in range(N1):
            if not constrained[k]:
                continue
            for i in range(q):
                if symmetric:
                    rho = 0.0
                    for j in range(1, k + 1):
                        rho += abs_gy[k - j, i] * e[j]
                    hi_val = y_nom[k, i] + rho
                    lo_val = y_nom[k, i] - rho
                else:
                    hi_val = y[k, i]
                    lo_val = y[k, i]
                if not (hi_val <= band_hi[k, i] + feas_tol and lo_val >= band_lo[k, i] - feas_tol):
                    ok = False
                    break
            if not ok:
                break
        feasible[c] = ok
    return obj, feasible
