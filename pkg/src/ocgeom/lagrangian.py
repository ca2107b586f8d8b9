"""Lagrangian side of an optimal control problem.

Residuals of the Lagrangian submanifold L_{C,L} of T*TQ, the Legendre map
and energy built from it, the reduced chart in which the presymplectic
form and energy become explicit, and identity checks tying all of this to
the Hamiltonian side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import geometry
from .kernels import Program, compile_exprs
from .ocp import OcProblem, kernel_constraints
from .pontryagin import COSTATE_PREFIX, Hamiltonian, build_hamiltonian
from .symexpr import Expr, const, differentiate, substitute, unparse, var

LCL_TOL = 1e-8


class LclPreconditionError(ValueError):
    """Point does not lie on L_{C,L} within tolerance."""


class NormalFormError(ValueError):
    """Problem admits no reduced chart of the supported shape."""


class PresymplecticObstruction(ArithmeticError):
    """i_X Omega = dE has no solution at the requested point."""


@dataclass(frozen=True)
class LclPoint:
    q: np.ndarray
    qdot: np.ndarray
    a: np.ndarray
    b: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        for name in ("q", "qdot", "a", "b", "u"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        n = self.q.size
        if not (self.qdot.size == self.a.size == self.b.size == n):
            raise ValueError("q, qdot, a, b must share one dimension")

    def chart_point(self) -> geometry.ChartPoint:
        """The T*TQ point (q, v, a, b) with v = qdot."""
        return geometry.ChartPoint.from_blocks("T*TQ", self.q, self.qdot, self.a, self.b)

    @classmethod
    def from_dh(cls, point, n: int, m: int) -> "LclPoint":
        """alpha applied to a D_H point (q, p, V_q, V_p, u)."""
        point = np.asarray(point, dtype=float)
        tt = geometry.ChartPoint("TT*Q", tuple(point[: 4 * n]), n)
        img = geometry.alpha(tt)
        q, v, a, b = (np.asarray(x) for x in img.blocks())
        return cls(q, v, a, b, point[4 * n : 4 * n + m])


def lcl_residual(problem: OcProblem, pt: LclPoint, mode: str | None = None) -> np.ndarray:
    """Residuals (a + Gamma_q' b - L_q, Gamma_u' b - L_u, qdot - Gamma).

    In abnormal mode L is replaced by zero.
    """
    mode = mode or problem.mode
    if pt.q.size != problem.n or pt.u.size != problem.m:
        raise ValueError("point dimensions do not match the problem")
    d = problem.evaluate_data(pt.q, pt.u)
    Lq, Lu = (d["dL_dq"], d["dL_du"]) if mode == "normal" else (0.0, 0.0)
    r1 = pt.a + d["dgamma_dq"].T @ pt.b - Lq
    r2 = d["dgamma_du"].T @ pt.b - Lu
    r3 = pt.qdot - d["gamma"]
    return np.concatenate([r1, r2, r3])


def _require_on_lcl(problem: OcProblem, pt: LclPoint, tol: float) -> None:
    r = np.max(np.abs(lcl_residual(problem, pt)))
    if not r <= tol:
        raise LclPreconditionError(f"point is off L_C,L (residual {r:.3e} > {tol:g})")


def legendre(problem: OcProblem, pt: LclPoint, tol: float = LCL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Base point (q, p) = (q, b) of alpha^-1 of a point on L_{C,L}."""
    _require_on_lcl(problem, pt, tol)
    return pt.q.copy(), pt.b.copy()


def energy(problem: OcProblem, pt: LclPoint, tol: float = LCL_TOL) -> float:
    """E = b . qdot - L(q, u) at a point of L_{C,L} with witness u."""
    _require_on_lcl(problem, pt, tol)
    L = problem.evaluate_data(pt.q, pt.u)["L"]
    if problem.mode == "abnormal":
        L = 0.0
    return float(pt.b @ pt.qdot - L)


# ---------------------------------------------------------------------------
# identity checks
@dataclass
class IdentityReport:
    name: str
    total: int
    passed: int
    max_residual: float
    tol: float
    failing: list[int] = field(default_factory=list)
    note: str = ""

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total

    def to_json(self) -> dict:
        doc = {
            "identity": self.name,
            "ok": self.ok,
            "passed": self.passed,
            "total": self.total,
            "max_residual": float(self.max_residual),
            "tol": self.tol,
            "failing_samples": self.failing[:20],
        }
        if self.note:
            doc["note"] = self.note
        return doc


def _tally(name: str, residuals, tol: float, note: str = "") -> IdentityReport:
    r = np.asarray(residuals, dtype=float)
    bad = ~(r <= tol)
    return IdentityReport(
        name=name,
        total=int(r.size),
        passed=int(np.sum(~bad)),
        max_residual=float(np.max(r)) if r.size else 0.0,
        tol=tol,
        failing=[int(i) for i in np.flatnonzero(bad)],
        note=note,
    )


def check_alpha_relation(problem: OcProblem, dh_points, tol: float = 1e-10) -> IdentityReport:
    """alpha maps every D_H point to a zero-residual point of L_{C,L}."""
    n, m = problem.n, problem.m
    res = [np.max(np.abs(lcl_residual(problem, LclPoint.from_dh(x, n, m)))) for x in dh_points]
    return _tally("alpha_relation", res, tol)


def check_energy_identity(h: Hamiltonian, lcl_points, tol: float = 1e-12) -> IdentityReport:
    """E = H o Leg on L_{C,L}."""
    res = []
    for pt in lcl_points:
        q, p = legendre(h.problem, pt)
        res.append(abs(energy(h.problem, pt) - h.value(q, p, pt.u)))
    return _tally("energy_identity", res, tol)


def check_tilde_inclusion(problem: OcProblem, lcl_points, tol: float = 1e-8) -> IdentityReport:
    """Every (q, qdot) on L_{C,L} is Gamma(c) for a witness c in tilde-C."""
    res = []
    for pt in lcl_points:
        d = problem.evaluate_data(pt.q, pt.u)
        _, vals = kernel_constraints(problem, pt.q, pt.u)
        miss = np.max(np.abs(d["gamma"] - pt.qdot))
        res.append(max(miss, float(np.max(np.abs(vals), initial=0.0))))
    return _tally("tilde_inclusion", res, tol)


def check_geometry(n: int, samples: int = 100, seed: int = 0) -> list[IdentityReport]:
    """kappa involution, alpha symplectomorphism, sharp o flat = id."""
    rng = np.random.default_rng(seed)
    kap, sf, ai = [], [], []
    for _ in range(samples):
        x = tuple(float(v) for v in rng.integers(-1000, 1000, 4 * n))
        ttq = geometry.ChartPoint("TTQ", x, n)
        kap.append(0.0 if geometry.kappa(geometry.kappa(ttq)) == ttq else 1.0)
        tt = geometry.ChartPoint("TT*Q", x, n)
        sf.append(0.0 if geometry.sharp(geometry.flat(tt)) == tt else 1.0)
        ai.append(0.0 if geometry.alpha_inverse(geometry.alpha(tt)) == tt else 1.0)
    a = geometry.check_symplectomorphism(
        geometry.alpha_matrix(n), geometry.tangent_lift_omega(n), geometry.omega_TQ(n)
    )
    f = geometry.check_symplectomorphism(
        geometry.flat_matrix(n), geometry.tangent_lift_omega(n), geometry.omega_TstarTstarQ(n)
    )
    return [
        _tally("kappa_involution", kap, 0.0),
        _tally("sharp_flat_identity", sf, 0.0),
        _tally("alpha_inverse_identity", ai, 0.0),
        _tally("alpha_symplectomorphism", [0.0 if a.holds and a.sign == 1 else 1.0], 0.0),
        _tally("flat_antisymplectic", [0.0 if f.holds and f.sign == -1 else 1.0], 0.0,
               note="flat pulls the canonical form back to minus d_T omega"),
    ]


# ---------------------------------------------------------------------------
# reduced chart
@dataclass(frozen=True)
class ChartEval:
    z: np.ndarray
    u: np.ndarray  # full control vector
    p: np.ndarray
    E: float
    dE: np.ndarray
    omega: np.ndarray
    dp_dz: np.ndarray


class ReducedChart:
    """Coordinates z = (q, b_alpha, u^a) on L_{C,L}.

    ``a``-states have dynamics equal to a single control (q'^a = u^a, each
    control used once); the rest are ``alpha``-states with q'^alpha =
    F^alpha.  Controls not pinned this way ("excess" controls) are
    recovered from the stationarity equations (dF/du^e)' b_alpha =
    dL/du^e, solved numerically when they do not appear linearly.
    """

    def __init__(self, problem: OcProblem, h: Hamiltonian | None = None):
        if problem.mode != "normal":
            raise NormalFormError("reduced chart is built for normal problems")
        self.problem = problem
        self.h = h or build_hamiltonian(problem, "normal")
        n = problem.n
        pinned: dict[int, str] = {}
        used: set[str] = set()
        for i, g in enumerate(problem.dynamics):
            if g.kind == "var" and g.name in problem.controls and g.name not in used:
                pinned[i] = g.name
                used.add(g.name)
        self.a_states = tuple(sorted(pinned))
        self.alpha_states = tuple(i for i in range(n) if i not in pinned)
        self.pinned = tuple(pinned[i] for i in self.a_states)
        self.excess = tuple(u for u in problem.controls if u not in used)
        self.b_names = tuple(COSTATE_PREFIX + problem.states[i] for i in self.alpha_states)
        self.coordinates = problem.states + self.b_names + self.pinned

        b = {i: var(COSTATE_PREFIX + problem.states[i]) for i in self.alpha_states}
        Lu = {u: differentiate(problem.cost, u) for u in problem.controls}
        # momentum components as expressions in (z, u^e)
        p_expr: list[Expr] = [const(0.0)] * n
        for i in self.alpha_states:
            p_expr[i] = b[i]
        for i, u in zip(self.a_states, self.pinned):
            acc = Lu[u]
            for j in self.alpha_states:
                acc = acc - b[j] * differentiate(problem.dynamics[j], u)
            p_expr[i] = acc
        self.momentum = tuple(p_expr)
        G = []
        for u in self.excess:
            acc = const(0.0)
            for j in self.alpha_states:
                acc = acc + b[j] * differentiate(problem.dynamics[j], u)
            G.append(acc - Lu[u])
        self.excess_equations = tuple(G)
        sub = {COSTATE_PREFIX + s: e for s, e in zip(problem.states, p_expr)}
        self.energy_expr = substitute(self.h.H, sub)
        self._check_solvable()

    # -- compiled pieces ------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.coordinates)

    @cached_property
    def _vars(self) -> tuple[str, ...]:
        return self.coordinates + self.excess

    @cached_property
    def _g_program(self) -> Program:
        exprs = list(self.excess_equations)
        exprs += [differentiate(g, v) for g in self.excess_equations for v in self.coordinates]
        exprs += [differentiate(g, v) for g in self.excess_equations for v in self.excess]
        return compile_exprs(exprs, self._vars)

    @cached_property
    def _main_program(self) -> Program:
        exprs = list(self.momentum)
        exprs += [differentiate(e, v) for e in self.momentum for v in self.coordinates]
        exprs += [differentiate(e, v) for e in self.momentum for v in self.excess]
        exprs += [self.energy_expr]
        exprs += [differentiate(self.energy_expr, v) for v in self.coordinates]
        exprs += [differentiate(self.energy_expr, v) for v in self.excess]
        return compile_exprs(exprs, self._vars)

    def _check_solvable(self) -> None:
        k = len(self.excess)
        if k == 0:
            return
        rng = np.random.default_rng(12345)
        d = self.dim
        for _ in range(8):
            x = rng.uniform(-1.5, 1.5, d + k)
            out = self._g_program(x)
            Gu = out[k + k * d :].reshape(k, k)
            s = np.linalg.svd(Gu, compute_uv=False)
            if np.all(np.isfinite(s)) and s[-1] > 1e-9 * max(1.0, s[0]):
                return
        raise NormalFormError(
            "excess controls " + ", ".join(self.excess) + " are not determined by stationarity; "
            "no reduced chart (L_C,L does not project onto a chart of the supported shape)"
        )

    # -- symbolic views (no excess controls) ------------------------------
    @cached_property
    def omega_expr(self) -> tuple[tuple[Expr, ...], ...] | None:
        """Omega as an expression matrix, or None when excess controls are present."""
        if self.excess:
            return None
        n = self.problem.n
        dp = [[differentiate(self.momentum[i], v) for v in self.coordinates] for i in range(n)]
        d = self.dim
        rows = []
        for k in range(d):
            row = []
            for l in range(d):
                acc = const(0.0)
                for i in range(n):
                    if k == i:
                        acc = acc + dp[i][l]
                    if l == i:
                        acc = acc - dp[i][k]
                row.append(acc)
            rows.append(tuple(row))
        return tuple(rows)

    def describe(self) -> dict:
        om = self.omega_expr
        return {
            "coordinates": list(self.coordinates),
            "a_states": [self.problem.states[i] for i in self.a_states],
            "alpha_states": [self.problem.states[i] for i in self.alpha_states],
            "excess_controls": list(self.excess),
            "momentum": [unparse(e) for e in self.momentum],
            "energy": unparse(self.energy_expr) if not self.excess else None,
            "omega": None if om is None else [[unparse(e) for e in row] for row in om],
        }

    # -- numerics -------------------------------------------------------
    def solve_excess(self, z, guess=None, tol: float = 1e-13, maxiter: int = 50) -> np.ndarray:
        k = len(self.excess)
        if k == 0:
            return np.empty(0)
        z = np.asarray(z, dtype=float)
        ue = np.zeros(k) if guess is None else np.array(guess, dtype=float)
        d = self.dim
        for _ in range(maxiter):
            out = self._g_program(np.concatenate([z, ue]))
            G = out[:k]
            if np.max(np.abs(G)) <= tol * (1.0 + np.max(np.abs(z))):
                return ue
            Gu = out[k + k * d :].reshape(k, k)
            ue = ue - np.linalg.lstsq(Gu, G, rcond=None)[0]
        out = self._g_program(np.concatenate([z, ue]))
        if np.max(np.abs(out[:k])) <= 1e3 * tol * (1.0 + np.max(np.abs(z))):
            return ue
        raise ArithmeticError("excess controls did not converge")

    def controls(self, z, ue=None) -> np.ndarray:
        """Full control vector at chart point ``z``."""
        z = np.asarray(z, dtype=float)
        ue = self.solve_excess(z) if ue is None else ue
        n_alpha = len(self.alpha_states)
        vals = dict(zip(self.pinned, z[self.problem.n + n_alpha :]))
        vals.update(zip(self.excess, ue))
        return np.array([vals[u] for u in self.problem.controls])

    def evaluate(self, z) -> ChartEval:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"chart point needs {self.dim} coordinates")
        n, d, k = self.problem.n, self.dim, len(self.excess)
        ue = self.solve_excess(z)
        x = np.concatenate([z, ue])
        out = self._main_program(x)
        o = 0
        p = out[o : o + n]; o += n
        p_z = out[o : o + n * d].reshape(n, d); o += n * d
        p_e = out[o : o + n * k].reshape(n, k); o += n * k
        E = out[o]; o += 1
        E_z = out[o : o + d]; o += d
        E_e = out[o : o + k]
        if k:
            g = self._g_program(x)
            Gz = g[k : k + k * d].reshape(k, d)
            Gu = g[k + k * d :].reshape(k, k)
            due = -np.linalg.solve(Gu, Gz)
            p_z = p_z + p_e @ due
            E_z = E_z + E_e @ due
        Q_z = np.zeros((n, d))
        Q_z[:, :n] = np.eye(n)
        omega = Q_z.T @ p_z - p_z.T @ Q_z
        return ChartEval(z, self.controls(z, ue), p, float(E), E_z, omega, p_z)

    def legendre(self, z) -> tuple[np.ndarray, np.ndarray]:
        ev = self.evaluate(z)
        return np.asarray(z[: self.problem.n], dtype=float), ev.p

    def lcl_point(self, z) -> LclPoint:
        """The point of L_{C,L} with chart coordinates ``z``."""
        ev = self.evaluate(z)
        q = np.asarray(z[: self.problem.n], dtype=float)
        dat = self.problem.evaluate_data(q, ev.u)
        a = dat["dL_dq"] - dat["dgamma_dq"].T @ ev.p
        return LclPoint(q, dat["gamma"], a, ev.p, ev.u)


def build_reduced_chart(problem: OcProblem) -> ReducedChart:
    return ReducedChart(problem)


@dataclass(frozen=True)
class FieldSolution:
    X: np.ndarray
    kernel: np.ndarray  # columns span ker Omega (empty when Omega is invertible)
    residual: float

    @property
    def unique(self) -> bool:
        return self.kernel.shape[1] == 0


def presymplectic_field(chart: ReducedChart, z, rtol: float = 1e-9) -> FieldSolution:
    """Solve i_X Omega = dE at chart point ``z``.

    With ``Omega[k, l] = Omega(d/dz^k, d/dz^l)`` the contraction is
    ``Omega.T @ X``.  Singular Omega yields a particular solution plus a
    kernel basis; an inconsistent system raises
    :class:`PresymplecticObstruction`.
    """
    ev = chart.evaluate(z)
    W, g = ev.omega, ev.dE
    A = W.T
    U, s, Vt = np.linalg.svd(A)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > rtol * smax)) if smax > 0 else 0
    if rank == A.shape[0]:
        X = np.linalg.solve(A, g)
        kernel = np.zeros((A.shape[0], 0))
    else:
        X = np.linalg.lstsq(A, g, rcond=rtol)[0]
        kernel = Vt[rank:].T
    res = float(np.max(np.abs(A @ X - g), initial=0.0))
    if not res <= 1e-9 * (1.0 + np.max(np.abs(g), initial=0.0)) * max(1.0, smax):
        raise PresymplecticObstruction(
            f"dE is not in the image of Omega at z={np.asarray(z).tolist()} (residual {res:.3e})"
        )
    return FieldSolution(X, kernel, res)
