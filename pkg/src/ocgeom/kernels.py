"""Hot numeric kernels.

Expressions are compiled to a flat postfix program (opcode, integer
argument, float argument) and run by a small stack machine.  The scalar
machine, its row-wise batch driver and the RK4 Hamiltonian integrator are
numba-compiled unless ``OCGEOM_BACKEND=numpy``; the batch evaluator also
has a vectorized numpy twin used on the numpy backend.

Kernels never raise on domain violations: they write NaN and leave the
check to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from ._accel import USE_NUMBA, force_jit, jit
from .symexpr import Expr

OP_CONST, OP_VAR, OP_NEG, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = range(8)
OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_SQRT = range(8, 13)

_BIN = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV}
_FUN = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "log": OP_LOG, "sqrt": OP_SQRT}

# integrator status codes
STATUS_OK = 0
STATUS_NO_CONVERGENCE = 1
STATUS_SINGULAR = 2
STATUS_NONFINITE = 3


@dataclass(frozen=True)
class Program:
    """Several expressions compiled against one ordered variable list."""

    variables: tuple[str, ...]
    ops: np.ndarray
    iargs: np.ndarray
    fargs: np.ndarray
    starts: np.ndarray
    depth: int

    @property
    def n_outputs(self) -> int:
        return len(self.starts) - 1

    def __call__(self, x) -> np.ndarray:
        return eval_one(self, np.asarray(x, dtype=float))

    def batch(self, X) -> np.ndarray:
        return eval_batch(self, X)

    @cached_property
    def _stack(self) -> np.ndarray:
        return np.empty(max(self.depth, 1))


def _emit(e: Expr, index: dict[str, int], ops, iargs, fargs) -> tuple[int, int]:
    """Append postfix code for ``e``; return (current depth, max depth)."""
    kind = e.kind
    if kind == "const":
        ops.append(OP_CONST), iargs.append(0), fargs.append(e.value)
        return 1, 1
    if kind == "var":
        if e.name not in index:
            raise KeyError(f"variable {e.name!r} not in program variables")
        ops.append(OP_VAR), iargs.append(index[e.name]), fargs.append(0.0)
        return 1, 1
    if kind in ("neg", "call", "pow"):
        _, d = _emit(e.args[0], index, ops, iargs, fargs)
        if kind == "neg":
            ops.append(OP_NEG), iargs.append(0)
        elif kind == "call":
            ops.append(_FUN[e.name]), iargs.append(0)
        else:
            ops.append(OP_POW), iargs.append(int(e.value))
        fargs.append(0.0)
        return 1, d
    _, da = _emit(e.args[0], index, ops, iargs, fargs)
    _, db = _emit(e.args[1], index, ops, iargs, fargs)
    ops.append(_BIN[kind]), iargs.append(0), fargs.append(0.0)
    return 1, max(da, db + 1)


def compile_exprs(exprs: Sequence[Expr], variables: Sequence[str]) -> Program:
    index = {v: i for i, v in enumerate(variables)}
    ops: list[int] = []
    iargs: list[int] = []
    fargs: list[float] = []
    starts = [0]
    depth = 1
    for e in exprs:
        _, d = _emit(e, index, ops, iargs, fargs)
        depth = max(depth, d)
        starts.append(len(ops))
    return Program(
        variables=tuple(variables),
        ops=np.asarray(ops, dtype=np.int64),
        iargs=np.asarray(iargs, dtype=np.int64),
        fargs=np.asarray(fargs, dtype=np.float64),
        starts=np.asarray(starts, dtype=np.int64),
        depth=depth,
    )


# ---------------------------------------------------------------------------
# stack machine
@jit
def run_program(ops, iargs, fargs, starts, lo, hi, x, out, stack):
    for k in range(lo, hi):
        sp = 0
        for j in range(starts[k], starts[k + 1]):
            op = ops[j]
            if op == OP_CONST:
                stack[sp] = fargs[j]
                sp += 1
            elif op == OP_VAR:
                stack[sp] = x[iargs[j]]
                sp += 1
            elif op == OP_NEG:
                stack[sp - 1] = -stack[sp - 1]
            elif op == OP_POW:
                stack[sp - 1] = stack[sp - 1] ** iargs[j]
            elif op == OP_SIN:
                stack[sp - 1] = np.sin(stack[sp - 1])
            elif op == OP_COS:
                stack[sp - 1] = np.cos(stack[sp - 1])
            elif op == OP_EXP:
                stack[sp - 1] = np.exp(stack[sp - 1])
            elif op == OP_LOG:
                v = stack[sp - 1]
                stack[sp - 1] = np.log(v) if v > 0.0 else np.nan
            elif op == OP_SQRT:
                v = stack[sp - 1]
                stack[sp - 1] = np.sqrt(v) if v >= 0.0 else np.nan
            else:
                b = stack[sp - 1]
                a = stack[sp - 2]
                sp -= 1
                if op == OP_ADD:
                    stack[sp - 1] = a + b
                elif op == OP_SUB:
                    stack[sp - 1] = a - b
                elif op == OP_MUL:
                    stack[sp - 1] = a * b
                else:
                    stack[sp - 1] = a / b if b != 0.0 else np.nan
        out[k - lo] = stack[0]


@jit
def run_program_rows(ops, iargs, fargs, starts, X, depth):
    nout = starts.shape[0] - 1
    out = np.empty((X.shape[0], nout))
    stack = np.empty(depth)
    row = np.empty(nout)
    for i in range(X.shape[0]):
        run_program(ops, iargs, fargs, starts, 0, nout, X[i], row, stack)
        for k in range(nout):
            out[i, k] = row[k]
    return out


def run_program_vectorized(ops, iargs, fargs, starts, X, depth):
    """Numpy twin of :func:`run_program_rows`: one pass per opcode over all rows."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    nout = len(starts) - 1
    out = np.empty((n, nout))
    with np.errstate(all="ignore"):
        for k in range(nout):
            stack: list[np.ndarray] = []
            for j in range(starts[k], starts[k + 1]):
                op = ops[j]
                if op == OP_CONST:
                    stack.append(np.full(n, fargs[j]))
                elif op == OP_VAR:
                    stack.append(X[:, iargs[j]])
                elif op == OP_NEG:
                    stack[-1] = -stack[-1]
                elif op == OP_POW:
                    stack[-1] = stack[-1] ** int(iargs[j])
                elif op == OP_SIN:
                    stack[-1] = np.sin(stack[-1])
                elif op == OP_COS:
                    stack[-1] = np.cos(stack[-1])
                elif op == OP_EXP:
                    stack[-1] = np.exp(stack[-1])
                elif op == OP_LOG:
                    v = stack[-1]
                    stack[-1] = np.where(v > 0.0, np.log(np.where(v > 0.0, v, 1.0)), np.nan)
                elif op == OP_SQRT:
                    v = stack[-1]
                    stack[-1] = np.where(v >= 0.0, np.sqrt(np.abs(v)), np.nan)
                else:
                    b = stack.pop()
                    a = stack[-1]
                    if op == OP_ADD:
                        stack[-1] = a + b
                    elif op == OP_SUB:
                        stack[-1] = a - b
                    elif op == OP_MUL:
                        stack[-1] = a * b
                    else:
                        stack[-1] = np.where(b != 0.0, a / np.where(b != 0.0, b, 1.0), np.nan)
            out[:, k] = stack[0]
    return out


def eval_one(prog: Program, x: np.ndarray) -> np.ndarray:
    out = np.empty(prog.n_outputs)
    run_program(prog.ops, prog.iargs, prog.fargs, prog.starts, 0, prog.n_outputs, x, out, prog._stack)
    return out


def eval_batch(prog: Program, X) -> np.ndarray:
    """Evaluate every output of ``prog`` on every row of ``X``."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    if X.shape[0] == 0:
        return np.empty((0, prog.n_outputs))
    if USE_NUMBA:
        return run_program_rows(prog.ops, prog.iargs, prog.fargs, prog.starts, X, max(prog.depth, 1))
    return run_program_vectorized(prog.ops, prog.iargs, prog.fargs, prog.starts, X, prog.depth)


# ---------------------------------------------------------------------------
# Hamiltonian integration with control elimination
@jit
def _solve_small(A, b, x):
    """Gaussian elimination with partial pivoting; False if singular."""
    m = b.shape[0]
    M = A.copy()
    r = b.copy()
    scale = 0.0
    for i in range(m):
        for j in range(m):
            scale = max(scale, abs(M[i, j]))
    if scale == 0.0:
        return False
    for c in range(m):
        piv = c
        for i in range(c + 1, m):
            if abs(M[i, c]) > abs(M[piv, c]):
                piv = i
        if abs(M[piv, c]) <= 1e-14 * scale:
            return False
        if piv != c:
            for j in range(m):
                tmp = M[c, j]
                M[c, j] = M[piv, j]
                M[piv, j] = tmp
            tmp = r[c]
            r[c] = r[piv]
            r[piv] = tmp
        for i in range(c + 1, m):
            f = M[i, c] / M[c, c]
            for j in range(c, m):
                M[i, j] -= f * M[c, j]
            r[i] -= f * r[c]
    for c in range(m - 1, -1, -1):
        s = r[c]
        for j in range(c + 1, m):
            s -= M[c, j] * x[j]
        x[c] = s / M[c, c]
    return True


@jit
def _max_abs(v):
    s = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if not a <= 1e300:
            return np.inf
        if a > s:
            s = a
    return s


@jit
def newton_controls(ops, iargs, fargs, starts, n, m, x, tol, maxiter, stack):
    """Solve dH/du(q, p, u) = 0 for the u-slots of ``x`` in place.

    Returns (status, residual, iterations).
    """
    g_lo = 2 * n + 2
    h_lo = g_lo + m
    g = np.empty(m)
    hess = np.empty((m, m))
    hflat = np.empty(m * m)
    du = np.empty(m)
    trial = x.copy()
    g_try = np.empty(m)
    run_program(ops, iargs, fargs, starts, g_lo, h_lo, x, g, stack)
    res = _max_abs(g)
    it = 0
    while it < maxiter:
        if res <= tol:
            return STATUS_OK, res, it
        if not res < np.inf:
            return STATUS_NONFINITE, res, it
        run_program(ops, iargs, fargs, starts, h_lo, h_lo + m * m, x, hflat, stack)
        for i in range(m):
            for j in range(m):
                hess[i, j] = hflat[i * m + j]
        if not _solve_small(hess, g, du):
            return STATUS_SINGULAR, res, it
        alpha = 1.0
        accepted = False
        for _ in range(30):
            for i in range(trial.shape[0]):
                trial[i] = x[i]
            for a in range(m):
                trial[2 * n + a] = x[2 * n + a] - alpha * du[a]
            run_program(ops, iargs, fargs, starts, g_lo, h_lo, trial, g_try, stack)
            r_try = _max_abs(g_try)
            if r_try < res or r_try <= tol:
                accepted = True
                break
            alpha *= 0.5
        it += 1
        if not accepted:
            # no decrease possible: accept stagnation at roundoff level
            if res <= 1e2 * tol:
                return STATUS_OK, res, it
            return STATUS_NO_CONVERGENCE, res, it
        for a in range(m):
            x[2 * n + a] = trial[2 * n + a]
        for a in range(m):
            g[a] = g_try[a]
        res = r_try
    if res <= tol:
        return STATUS_OK, res, it
    return STATUS_NO_CONVERGENCE, res, it


@jit
def _stage(ops, iargs, fargs, starts, n, m, x, y, k, tol, maxiter, stack, buf):
    """Evaluate the RK right-hand side at augmented state ``y`` = (q, p, J)."""
    for i in range(2 * n):
        x[i] = y[i]
    status, res, it = newton_controls(ops, iargs, fargs, starts, n, m, x, tol, maxiter, stack)
    if status != STATUS_OK:
        return status
    run_program(ops, iargs, fargs, starts, 0, 2 * n + 1, x, buf, stack)
    for i in range(n):
        k[i] = buf[i]
        k[n + i] = -buf[n + i]
    k[2 * n] = buf[2 * n]
    for i in range(2 * n + 1):
        if not abs(k[i]) < np.inf:
            return STATUS_NONFINITE
    return STATUS_OK


@jit
def rk4_hamilton(ops, iargs, fargs, starts, depth, n, m, q0, p0, u0, t0, tf, steps, tol, maxiter):
    """Classical RK4 for q' = dH/dp, p' = -dH/dq, J' = L with u = u*(q, p).

    Program output layout: dH/dp (n), dH/dq (n), L, H, dH/du (m),
    d2H/du2 (m*m, row major); variables ordered (q, p, u).

    Returns (Y, U, Hs, status, last) where rows of Y are (q, p, J) on the
    uniform grid and ``last`` is the final valid grid index.
    """
    h = (tf - t0) / steps
    d = 2 * n + 1
    Y = np.full((steps + 1, d), np.nan)
    U = np.full((steps + 1, m), np.nan)
    Hs = np.full(steps + 1, np.nan)
    stack = np.empty(depth)
    buf = np.empty(2 * n + 2)
    x = np.empty(2 * n + m)
    for i in range(n):
        x[i] = q0[i]
        x[n + i] = p0[i]
    for a in range(m):
        x[2 * n + a] = u0[a]
    y = np.zeros(d)
    for i in range(2 * n):
        y[i] = x[i]
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    hval = np.empty(1)
    for s in range(steps + 1):
        status = _stage(ops, iargs, fargs, starts, n, m, x, y, k1, tol, maxiter, stack, buf)
        if status != STATUS_OK:
            return Y, U, Hs, status, s - 1
        for i in range(d):
            Y[s, i] = y[i]
        for a in range(m):
            U[s, a] = x[2 * n + a]
        run_program(ops, iargs, fargs, starts, 2 * n + 1, 2 * n + 2, x, hval, stack)
        Hs[s] = hval[0]
        if s == steps:
            break
        for i in range(d):
            tmp[i] = y[i] + 0.5 * h * k1[i]
        status = _stage(ops, iargs, fargs, starts, n, m, x, tmp, k2, tol, maxiter, stack, buf)
        if status != STATUS_OK:
            return Y, U, Hs, status, s
        for i in range(d):
            tmp[i] = y[i] + 0.5 * h * k2[i]
        status = _stage(ops, iargs, fargs, starts, n, m, x, tmp, k3, tol, maxiter, stack, buf)
        if status != STATUS_OK:
            return Y, U, Hs, status, s
        for i in range(d):
            tmp[i] = y[i] + h * k3[i]
        status = _stage(ops, iargs, fargs, starts, n, m, x, tmp, k4, tol, maxiter, stack, buf)
        if status != STATUS_OK:
            return Y, U, Hs, status, s
        for i in range(d):
            y[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return Y, U, Hs, STATUS_OK, steps


# ---------------------------------------------------------------------------
# brute-force sweep used as an independent oracle for switching extremals
@force_jit
def two_arc_sweep(roots, gam, cost, dq, T, tgrid, endpoint_tol):
    """Cheapest admissible two-arc (or one-arc) trajectory over a grid.

    ``roots``/``gam``/``cost`` are (P, R) arrays holding, for each costate
    grid value, the stationary controls (NaN padded), their velocities and
    their running costs.  Every ordered pair of roots is tried at every
    switch time in ``tgrid``; a candidate is admissible when its endpoint
    misses by at most ``endpoint_tol``.  Returns (best cost, count).
    """
    best = np.inf
    count = 0
    P, R = roots.shape
    for ip in range(P):
        for i in range(R):
            if roots[ip, i] != roots[ip, i]:
                continue
            for j in range(R):
                if roots[ip, j] != roots[ip, j]:
                    continue
                for t1 in tgrid:
                    miss = gam[ip, i] * t1 + gam[ip, j] * (T - t1) - dq
                    if abs(miss) <= endpoint_tol:
                        J = cost[ip, i] * t1 + cost[ip, j] * (T - t1)
                        count += 1
                        if J < best:
                            best = J
    return best, count
