"""Integrability algorithm for optimal control problems.

Two concrete branches:

* :func:`stabilize` differentiates the stationarity constraints dH/du = 0
  along the dynamics, solving for control rates where possible and
  collecting new constraints otherwise, until nothing new appears.
* :func:`enumerate_piecewise` lists extremals made of constant-control
  arcs for scalar problems whose data do not depend on the state.  The
  costate is then constant, every arc control is a stationary point of
  H(p, .), and at a switch the Hamiltonian must be continuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.optimize import brentq, linprog

from .kernels import compile_exprs, two_arc_sweep
from .ocp import OcProblem, ProblemError
from .pontryagin import Hamiltonian, build_hamiltonian, sample_grid
from .symexpr import (
    Expr,
    NonPolynomialError,
    Polynomial,
    const,
    differentiate,
    free_variables,
    polynomial_real_roots,
    real_roots_univariate,
    to_polynomial,
    unparse,
    var,
)

RATE_PREFIX = "d_"


class OutOfClassError(ProblemError):
    """Problem is outside the class an operation handles."""


# ---------------------------------------------------------------------------
# constraint stabilization
@dataclass
class ConstraintLevel:
    index: int
    constraints: list[Expr]
    candidates: list[Expr]
    new_constraints: list[Expr]
    determined: dict[str, Expr]
    status: str  # continuing | stabilized | empty | exhausted

    def to_json(self) -> dict:
        return {
            "level": self.index,
            "constraints": [unparse(e) for e in self.constraints],
            "candidates": [unparse(e) for e in self.candidates],
            "new_constraints": [unparse(e) for e in self.new_constraints],
            "determined": {k: unparse(v) for k, v in self.determined.items()},
            "status": self.status,
        }


def project_onto(constraints: list[Expr], variables, X, iters: int = 60, tol: float = 1e-13):
    """Gauss-Newton projection of rows of X onto {constraints = 0}."""
    X = np.array(np.atleast_2d(X), dtype=float, copy=True)
    k, d = len(constraints), len(variables)
    if k == 0:
        return X, np.ones(len(X), dtype=bool)
    exprs = list(constraints) + [differentiate(c, v) for c in constraints for v in variables]
    prog = compile_exprs(exprs, variables)
    for _ in range(iters):
        out = prog.batch(X)
        C, J = out[:, :k], out[:, k:].reshape(-1, k, d)
        fin = np.all(np.isfinite(out), axis=1)
        active = fin & (np.max(np.abs(C), axis=1) > tol * (1.0 + np.max(np.abs(X), axis=1)))
        if not np.any(active):
            break
        X[active] -= np.einsum("nij,nj->ni", np.linalg.pinv(J[active]), C[active])
    out = prog.batch(X)
    C = out[:, :k]
    ok = np.all(np.isfinite(out), axis=1) & (
        np.max(np.abs(C), axis=1) <= 1e2 * tol * (1.0 + np.max(np.abs(X), axis=1))
    )
    return X, ok


def _poisson(h: Hamiltonian, phi: Expr) -> Expr:
    """{phi, H} = dphi/dq . dH/dp - dphi/dp . dH/dq."""
    acc = const(0.0)
    for s, hp in zip(h.states, h.dHdp):
        acc = acc + differentiate(phi, s) * hp
    for c, hq in zip(h.costates, h.dHdq):
        acc = acc - differentiate(phi, c) * hq
    return acc


def _values(exprs: list[Expr], variables, X) -> np.ndarray:
    if not exprs:
        return np.zeros((len(X), 0))
    return compile_exprs(exprs, variables).batch(X)


def stabilize(
    h: Hamiltonian,
    max_levels: int = 5,
    samples=None,
    tol: float = 1e-9,
    seed: int = 0,
    box: float = 2.0,
) -> list[ConstraintLevel]:
    """Constraint stabilization starting from dH/du = 0.

    At each level the active constraints phi are differentiated along the
    flow, phi' = {phi, H} + dphi/du . u', and the linear system in u' is
    reduced by Gauss-Jordan elimination.  Pivots are coefficients that are
    numerically nonzero on every sample of the current constraint set;
    rows that vanish identically give candidate constraints, which count
    as new unless they already vanish on the samples.
    """
    if max_levels < 1:
        raise ValueError("max_levels must be at least 1")
    variables = h.variables
    if samples is None:
        samples = sample_grid(h, 256, seed=seed, box=box, include_center=False)
    base = np.atleast_2d(np.asarray(samples, dtype=float))
    rates = [var(RATE_PREFIX + u) for u in h.controls]

    active = list(h.dHdu)
    X, ok = project_onto(active, variables, base)
    X = X[ok]
    levels = [ConstraintLevel(0, list(active), [], list(active), {}, "continuing" if len(X) else "empty")]
    if not len(X):
        return levels

    for k in range(1, max_levels + 1):
        rows = [[differentiate(phi, u) for u in h.controls] + [_poisson(h, phi)] for phi in active]
        pivots: dict[int, int] = {}  # column -> row
        used_rows: set[int] = set()
        for col in range(h.m):
            best, best_row = 0.0, None
            for r in range(len(rows)):
                if r in used_rows:
                    continue
                v = np.abs(_values([rows[r][col]], variables, X)[:, 0])
                scale = 1.0 + np.max(np.abs(_values(rows[r][:-1], variables, X)), initial=0.0)
                lo = float(np.min(v)) if np.all(np.isfinite(v)) else 0.0
                if lo > tol * scale and lo > best:
                    best, best_row = lo, r
            if best_row is None:
                continue
            pivots[col] = best_row
            used_rows.add(best_row)
            prow = rows[best_row]
            piv = prow[col]
            rows[best_row] = [e / piv for e in prow]
            for r in range(len(rows)):
                if r == best_row:
                    continue
                f = rows[r][col]
                if f.is_const and f.value == 0.0:
                    continue
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[best_row])]

        determined: dict[str, Expr] = {}
        for col, r in pivots.items():
            acc = -rows[r][-1]
            for c2 in range(h.m):
                if c2 != col and c2 not in pivots:
                    acc = acc - rows[r][c2] * rates[c2]
            determined[h.controls[col]] = acc

        candidates = []
        for r in range(len(rows)):
            if r in used_rows:
                continue
            coef = _values(rows[r][:-1], variables, X)
            if coef.size and np.max(np.abs(coef)) > tol * (1.0 + np.max(np.abs(coef))):
                # coefficients not identically zero but no usable pivot: keep as a row
                continue
            candidates.append(rows[r][-1])

        new = []
        for c in candidates:
            v = _values([c], variables, X)[:, 0]
            scale = 1.0 + np.max(np.abs(X), axis=1)
            if not np.all(np.abs(v) <= 1e3 * tol * scale):
                new.append(c)

        if not new:
            levels.append(ConstraintLevel(k, list(active), candidates, [], determined, "stabilized"))
            return levels
        active = active + new
        X, ok = project_onto(active, variables, base)
        X = X[ok]
        status = "continuing" if len(X) else "empty"
        levels.append(ConstraintLevel(k, list(active), candidates, new, determined, status))
        if status == "empty":
            return levels
    levels[-1].status = "exhausted"
    return levels


# ---------------------------------------------------------------------------
# constant controls
def _scalar_state_free(h: Hamiltonian) -> tuple[str, str, str]:
    if h.m != 1:
        raise OutOfClassError("a scalar control is required")
    if h.n != 1:
        raise OutOfClassError("a scalar state is required")
    return h.states[0], h.costates[0], h.controls[0]


def constant_control_candidates(h: Hamiltonian, p_value: float) -> list[float]:
    """Real roots u of dH/du(p, u) = 0 for a state-independent problem."""
    if h.m != 1:
        raise OutOfClassError("a scalar control is required")
    g = h.dHdu[0]
    qdep = sorted(free_variables(g) & set(h.states))
    if qdep:
        raise OutOfClassError(f"dH/du depends on the state ({', '.join(qdep)})")
    binding = {c: float(p_value) for c in h.costates}
    try:
        return real_roots_univariate(g, h.controls[0], binding)
    except NonPolynomialError as exc:
        raise OutOfClassError(f"dH/du is not polynomial in the control: {exc}") from exc


# ---------------------------------------------------------------------------
# piecewise-constant extremals
@dataclass
class PiecewiseSolution:
    controls: tuple[float, ...]
    durations: tuple[float, ...]
    t0: float
    q0: float
    costate: float
    hamiltonian: float
    cost: float
    residual: float
    gamma: tuple[float, ...]
    free_parameters: int = 0

    @property
    def switches(self) -> int:
        return len(self.controls) - 1

    @property
    def switch_times(self) -> tuple[float, ...]:
        return tuple(self.t0 + float(x) for x in np.cumsum(self.durations)[:-1])

    @property
    def arcs(self) -> list[tuple[float, float]]:
        return list(zip(self.controls, self.durations))

    def state_at(self, t: float) -> float:
        q, s = self.q0, self.t0
        for g, d in zip(self.gamma, self.durations):
            if t <= s + d:
                return q + g * (t - s)
            q, s = q + g * d, s + d
        return q

    def sample(self, steps: int = 100):
        """(t, q, p, u) on a uniform grid; u is right-continuous at switches."""
        tf = self.t0 + sum(self.durations)
        t = np.linspace(self.t0, tf, steps + 1)
        bounds = np.cumsum(self.durations) + self.t0
        idx = np.minimum(np.searchsorted(bounds, t, side="right"), len(self.controls) - 1)
        u = np.asarray(self.controls)[idx]
        q = np.array([self.state_at(x) for x in t])
        p = np.full_like(t, self.costate)
        return t, q, p, u

    def to_json(self) -> dict:
        return {
            "arcs": [{"control": [float(u)], "duration": float(d)} for u, d in self.arcs],
            "switch_times": [float(x) for x in self.switch_times],
            "costate": [float(self.costate)],
            "hamiltonian": float(self.hamiltonian),
            "J": float(self.cost),
            "residual": float(self.residual),
            "free_parameters": int(self.free_parameters),
        }


@dataclass
class _ScalarData:
    gam: Polynomial
    L: Polynomial
    dgam: Polynomial
    dL: Polynomial
    name: str

    def g(self, p: float) -> Polynomial:
        """dH/du at costate p as a polynomial in u."""
        a, b = list(self.dgam.coefficients), list(self.dL.coefficients)
        k = max(len(a), len(b))
        a += [0.0] * (k - len(a))
        b += [0.0] * (k - len(b))
        return Polynomial(self.name, tuple(p * x - y for x, y in zip(a, b)))

    def H(self, p: float, u) -> np.ndarray:
        return p * self.gam(np.asarray(u, dtype=float)) - self.L(np.asarray(u, dtype=float))

    def roots(self, p: float) -> list[float]:
        poly = self.g(p)
        if poly.is_zero:
            return []
        return [r.value for r in polynomial_real_roots(poly)]


def _class_check(problem: OcProblem, max_switches: int) -> _ScalarData:
    why = []
    if problem.n != 1 or problem.m != 1:
        why.append("needs exactly one state and one control")
    if problem.mode != "normal":
        why.append("needs normal mode")
    if problem.tf is None:
        why.append("needs a fixed final time")
    if problem.q0 is None or problem.qf is None or problem.qf[0] is None:
        why.append("needs fixed initial and final states")
    if max_switches not in (0, 1, 2):
        why.append("max_switches must be 0, 1 or 2")
    if not why:
        qdep = (free_variables(problem.dynamics[0]) | free_variables(problem.cost)) & set(problem.states)
        if qdep:
            why.append("dynamics and cost must not depend on the state")
    if why:
        raise OutOfClassError("problem outside the piecewise-constant class: " + "; ".join(why))
    u = problem.controls[0]
    try:
        gam = to_polynomial(problem.dynamics[0], u)
        L = to_polynomial(problem.cost, u)
    except NonPolynomialError as exc:
        raise OutOfClassError(f"dynamics and cost must be polynomial in {u}: {exc}") from exc
    if gam.degree < 1:
        raise OutOfClassError("dynamics do not depend on the control")
    return _ScalarData(gam, L, gam.derivative(), L.derivative(), u)


def _poly_sub(a: Polynomial, b: Polynomial) -> Polynomial:
    x, y = list(a.coefficients), list(b.coefficients)
    k = max(len(x), len(y))
    x += [0.0] * (k - len(x))
    y += [0.0] * (k - len(y))
    return Polynomial(a.variable, tuple(s - t for s, t in zip(x, y)))


def _poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    out = [0.0] * (len(a.coefficients) + len(b.coefficients) - 1)
    for i, x in enumerate(a.coefficients):
        for j, y in enumerate(b.coefficients):
            out[i + j] += x * y
    return Polynomial(a.variable, tuple(out))


def _real_roots(poly: Polynomial) -> list[float]:
    if poly.is_zero or poly.degree < 1:
        return []
    return [r.value for r in polynomial_real_roots(poly)]


def critical_costates(data: _ScalarData) -> list[float]:
    """Costates where stationary controls merge or escape to infinity."""
    # phi(u) = L'(u)/Gamma'(u); critical points solve L'' Gamma' - L' Gamma'' = 0
    num = _poly_sub(_poly_mul(data.dL.derivative(), data.dgam), _poly_mul(data.dL, data.dgam.derivative()))
    out = []
    for u in _real_roots(num):
        d = data.dgam(u)
        if abs(d) > 1e-12:
            out.append(data.dL(u) / d)
    # leading coefficient of p Gamma' - L' vanishes: a root escapes to infinity
    a, b = data.dgam.coefficients, data.dL.coefficients
    k = max(len(a), len(b)) - 1
    la = a[k] if k < len(a) else 0.0
    lb = b[k] if k < len(b) else 0.0
    if la != 0.0:
        out.append(lb / la)
    return sorted(set(out))


def switching_costates(data: _ScalarData, pmax: float, grid: int = 400) -> list[float]:
    """Costates p with two distinct stationary controls of equal H(p, .)."""
    crit = [c for c in critical_costates(data) if -pmax < c < pmax]
    edges = [-pmax] + crit + [pmax]
    found: list[float] = []

    def branch_gap(p, i, j, count):
        r = data.roots(p)
        if len(r) != count:
            return math.nan
        return float(data.H(p, r[i]) - data.H(p, r[j]))

    for lo, hi in zip(edges[:-1], edges[1:]):
        shrink = 1e-6 * (1.0 + max(abs(lo), abs(hi)))
        a, b = lo + shrink, hi - shrink
        if not a < b:
            continue
        ps = np.linspace(a, b, grid)
        roots = [data.roots(p) for p in ps]
        # split where the branch count changes (numerically fragile points)
        start = 0
        for s in range(1, grid + 1):
            if s < grid and len(roots[s]) == len(roots[start]):
                continue
            seg = range(start, s)
            count = len(roots[start])
            for i in range(count):
                for j in range(i + 1, count):
                    vals = [float(data.H(ps[t], roots[t][i]) - data.H(ps[t], roots[t][j])) for t in seg]
                    for t_idx, t in enumerate(seg):
                        if vals[t_idx] == 0.0:
                            found.append(float(ps[t]))
                        if t_idx + 1 < len(vals) and vals[t_idx] * vals[t_idx + 1] < 0:
                            root = brentq(
                                branch_gap, ps[t], ps[t + 1], args=(i, j, count), xtol=1e-15, rtol=1e-15
                            )
                            found.append(float(root))
            start = s
    found.sort()
    merged: list[float] = []
    for p in found:
        if merged and abs(p - merged[-1]) <= 1e-9 * (1.0 + abs(p)):
            continue
        merged.append(0.0 if abs(p) < 1e-15 else p)
    return merged


def _durations(gam_vals: list[float], T: float, dq: float, tol: float):
    """Positive durations with sum T and sum gamma*d = dq; (durations, dof) or None."""
    k = len(gam_vals)
    A = np.vstack([np.ones(k), np.asarray(gam_vals)])
    b = np.array([T, dq])
    rank = np.linalg.matrix_rank(A, tol=1e-12)
    if k == 1:
        d = np.array([T])
        return (d, 0) if abs(gam_vals[0] * T - dq) <= tol * (1.0 + abs(dq)) else None
    if k == 2 and rank == 2:
        d = np.linalg.solve(A, b)
        return (d, 0) if np.all(d > tol * T) else None
    # underdetermined: pick the point maximizing the shortest arc
    c = np.zeros(k + 1)
    c[-1] = -1.0
    A_eq = np.hstack([A, np.zeros((2, 1))])
    A_ub = np.hstack([-np.eye(k), np.ones((k, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(k), A_eq=A_eq, b_eq=b,
                  bounds=[(0, None)] * k + [(None, None)], method="highs")
    if res.status != 0 or res.x[-1] <= tol * T:
        return None
    d = res.x[:k]
    # polish onto the equality constraints
    d = d + np.linalg.lstsq(A, b - A @ d, rcond=None)[0]
    return (d, k - rank)


def enumerate_piecewise(
    problem: OcProblem,
    max_switches: int = 1,
    tol: float = 1e-9,
    pmax: float | None = None,
) -> list[PiecewiseSolution]:
    """All piecewise-constant extremals with at most ``max_switches`` switches.

    Sorted by cost, then number of switches, then the control sequence.
    """
    data = _class_check(problem, max_switches)
    t0, tf = problem.t0, problem.tf
    T = tf - t0
    q0, qf = problem.q0[0], problem.qf[0]
    dq = qf - q0

    candidates: list[tuple[float, list[float]]] = []  # (costate, control sequence)
    # one arc: Gamma(u) T = dq and p from stationarity
    const_p: list[float] = []
    target = _poly_sub(Polynomial(data.name, tuple(T * c for c in data.gam.coefficients)),
                       Polynomial(data.name, (dq,)))
    for u in _real_roots(target):
        d = data.dgam(u)
        if abs(d) > 1e-12:
            p = data.dL(u) / d
        elif abs(data.dL(u)) <= 1e-12:
            p = 0.0
        else:
            continue
        const_p.append(p)
        candidates.append((p, [u]))

    if max_switches >= 1:
        crit = critical_costates(data)
        if pmax is None:
            pmax = 10.0 * (1.0 + max([abs(c) for c in crit + const_p], default=0.0))
        for p in switching_costates(data, pmax):
            r = data.roots(p)
            Hs = data.H(p, r)
            groups: list[list[float]] = []
            for u, hv in sorted(zip(r, Hs), key=lambda x: x[1]):
                if groups and abs(hv - data.H(p, groups[-1][0])) <= 1e-9 * (1.0 + abs(hv)):
                    groups[-1].append(u)
                else:
                    groups.append([u])
            for grp in groups:
                if len(grp) < 2:
                    continue
                for length in range(2, max_switches + 2):
                    for seq in product(sorted(grp), repeat=length):
                        if any(abs(a - b) <= 1e-9 for a, b in zip(seq, seq[1:])):
                            continue
                        candidates.append((p, list(seq)))

    sols: list[PiecewiseSolution] = []
    for p, seq in candidates:
        if not all(problem.in_control_domain([u]) for u in seq):
            continue
        gv = [float(data.gam(u)) for u in seq]
        got = _durations(gv, T, dq, tol)
        if got is None:
            continue
        d, dof = got
        Hs = [float(data.H(p, u)) for u in seq]
        res = max(
            abs(sum(g * x for g, x in zip(gv, d)) - dq),
            abs(float(np.sum(d)) - T),
            max(abs(data.g(p)(u)) for u in seq),
            max(abs(hv - Hs[0]) for hv in Hs),
        )
        if res > tol:
            continue
        J = float(sum(data.L(u) * x for u, x in zip(seq, d)))
        sols.append(
            PiecewiseSolution(
                controls=tuple(float(u) for u in seq),
                durations=tuple(float(x) for x in d),
                t0=t0,
                q0=q0,
                costate=float(p),
                hamiltonian=Hs[0],
                cost=J,
                residual=float(res),
                gamma=tuple(gv),
                free_parameters=int(dof),
            )
        )
    return _sort_unique(sols, tol)


def _sort_unique(sols: list[PiecewiseSolution], tol: float) -> list[PiecewiseSolution]:
    uniq: list[PiecewiseSolution] = []
    for s in sols:
        dup = any(
            len(s.controls) == len(o.controls)
            and all(abs(a - b) <= tol * (1 + abs(a)) for a, b in zip(s.controls, o.controls))
            and all(abs(a - b) <= 1e-6 for a, b in zip(s.durations, o.durations))
            for o in uniq
        )
        if not dup:
            uniq.append(s)
    uniq.sort(key=lambda s: s.cost)
    buckets: list[list[PiecewiseSolution]] = []
    for s in uniq:
        if buckets and abs(s.cost - buckets[-1][0].cost) <= tol * (1.0 + abs(s.cost)):
            buckets[-1].append(s)
        else:
            buckets.append([s])
    out = []
    for b in buckets:
        out.extend(sorted(b, key=lambda s: (s.switches, s.controls)))
    return out


# ---------------------------------------------------------------------------
# brute-force oracle
def brute_force_best(
    problem: OcProblem,
    pmax: float,
    pstep: float = 1e-3,
    tstep: float = 1e-4,
    endpoint_tol: float | None = None,
) -> tuple[float, int]:
    """Cheapest one- or two-arc constant-costate candidate on a grid.

    No Hamiltonian continuity is imposed, so this searches a superset of
    the extremals returned by :func:`enumerate_piecewise`.  Returns
    (best cost, number of admissible grid candidates).
    """
    data = _class_check(problem, 1)
    T = problem.tf - problem.t0
    dq = problem.qf[0] - problem.q0[0]
    ps = np.round(np.arange(-pmax, pmax + 0.5 * pstep, pstep), 12)
    rows = []
    for p in ps:
        r = [u for u in data.roots(p) if problem.in_control_domain([u])]
        rows.append(r)
    R = max((len(r) for r in rows), default=0)
    if R == 0:
        return math.inf, 0
    roots = np.full((len(ps), R), np.nan)
    for i, r in enumerate(rows):
        roots[i, : len(r)] = r
    gam = data.gam(np.nan_to_num(roots))
    cost = data.L(np.nan_to_num(roots))
    tgrid = np.round(np.arange(0.0, T + 0.5 * tstep, tstep), 12)
    if endpoint_tol is None:
        endpoint_tol = tstep * max(1.0, float(np.nanmax(np.abs(np.where(np.isnan(roots), 0.0, gam)))))
    best, count = two_arc_sweep(roots, gam, cost, float(dq), float(T), tgrid, float(endpoint_tol))
    return float(best), int(count)
