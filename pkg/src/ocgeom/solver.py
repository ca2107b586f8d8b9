"""Numerics for regular problems: control elimination, RK4, shooting."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .ocp import OcProblem
from .pontryagin import Hamiltonian, build_hamiltonian
from .symexpr import DomainError

ELIM_TOL = 1e-12
ELIM_MAXITER = 50


class EliminationError(ArithmeticError):
    pass


class CausticWarning(RuntimeWarning):
    pass


class IntegrationError(ArithmeticError):
    def __init__(self, message: str, partial: "Trajectory | None" = None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class Elimination:
    u: np.ndarray
    residual: float
    iterations: int
    sigma_min: float
    negative_definite: bool

    @property
    def caustic(self) -> bool:
        return not self.sigma_min > 1e-9


def eliminate_control(
    h: Hamiltonian, q, p, guess=None, tol: float = ELIM_TOL, maxiter: int = ELIM_MAXITER
) -> Elimination:
    """Root of dH/du(q, p, .) by damped Newton from ``guess``."""
    prog = h.flow_program
    n, m = h.n, h.m
    u0 = np.zeros(m) if guess is None else np.atleast_1d(np.asarray(guess, dtype=float))
    x = h.pack(q, p, u0)
    stack = np.empty(max(prog.depth, 1))
    status, res, it = kernels.newton_controls(
        prog.ops, prog.iargs, prog.fargs, prog.starts, n, m, x, tol, maxiter, stack
    )
    if status == kernels.STATUS_SINGULAR:
        raise EliminationError(f"d2H/du2 is singular near u={x[2 * n:].tolist()} (caustic)")
    if status != kernels.STATUS_OK:
        raise EliminationError(f"control elimination did not converge (residual {res:.3e} after {it} steps)")
    u = x[2 * n :].copy()
    Huu = h.hessian_uu(q, p, u)
    s = np.linalg.svd(Huu, compute_uv=False)
    sym = 0.5 * (Huu + Huu.T)
    negdef = bool(np.all(np.linalg.eigvalsh(sym) < 0))
    if not s[-1] > 1e-9:
        warnings.warn(f"caustic point: sigma_min(d2H/du2) = {s[-1]:.3e}", CausticWarning, stacklevel=2)
    return Elimination(u, float(res), int(it), float(s[-1]), negdef)


@dataclass
class Trajectory:
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    u: np.ndarray
    J: float
    H: np.ndarray
    states: tuple[str, ...]
    costates: tuple[str, ...]
    controls: tuple[str, ...]
    cost_path: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def steps(self) -> int:
        return len(self.t) - 1

    @property
    def h_drift(self) -> float:
        return float(np.max(np.abs(self.H - self.H[0]))) if len(self.H) else 0.0

    def columns(self) -> list[str]:
        return ["t", *self.states, *self.costates, *self.controls]

    def table(self) -> np.ndarray:
        return np.column_stack([self.t, self.q, self.p, self.u])

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns()) + "\n")
        for row in self.table():
            buf.write(",".join(format(float(x) + 0.0, ".17g") for x in row) + "\n")
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text, encoding="utf-8")
        return text


def _trajectory(h: Hamiltonian, t, Y, U, Hs) -> Trajectory:
    n = h.n
    return Trajectory(
        t=t,
        q=Y[:, :n].copy(),
        p=Y[:, n : 2 * n].copy(),
        u=U.copy(),
        J=float(Y[-1, 2 * n]) if len(Y) else float("nan"),
        H=Hs.copy(),
        states=h.states,
        costates=h.costates,
        controls=h.controls,
        cost_path=Y[:, 2 * n].copy(),
    )


def integrate_hamilton(
    h: Hamiltonian,
    q0,
    p0,
    t0: float,
    tf: float,
    steps: int = 1000,
    guess=None,
    tol: float = ELIM_TOL,
) -> Trajectory:
    """Classical RK4 on q' = dH/dp, p' = -dH/dq with u = u*(q, p).

    The running cost is integrated alongside, so ``J`` has the same order.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not tf > t0:
        raise ValueError("tf must exceed t0")
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    p0 = np.atleast_1d(np.asarray(p0, dtype=float))
    first = eliminate_control(h, q0, p0, guess, tol)
    prog = h.flow_program
    Y, U, Hs, status, last = kernels.rk4_hamilton(
        prog.ops, prog.iargs, prog.fargs, prog.starts, max(prog.depth, 1),
        h.n, h.m, q0, p0, first.u, float(t0), float(tf), int(steps), tol, ELIM_MAXITER,
    )
    t = np.linspace(t0, tf, steps + 1)
    if status != kernels.STATUS_OK:
        k = last + 1
        partial = _trajectory(h, t[:k], Y[:k], U[:k], Hs[:k]) if k > 0 else None
        reason = {
            kernels.STATUS_NO_CONVERGENCE: "control elimination did not converge",
            kernels.STATUS_SINGULAR: "d2H/du2 became singular",
            kernels.STATUS_NONFINITE: "non-finite value in the vector field",
        }.get(status, "integration failed")
        when = t[min(max(last, 0), steps)]
        raise IntegrationError(f"{reason} near t={when:.6g}", partial)
    if not np.all(np.isfinite(Y)):
        raise DomainError("non-finite state along the trajectory")
    return _trajectory(h, t, Y, U, Hs)


@dataclass
class ShootResult:
    trajectory: Trajectory | None
    p0: np.ndarray
    converged: bool
    iterations: int
    residual: float
    message: str = ""

    def summary(self, h: Hamiltonian) -> dict:
        tr = self.trajectory
        doc = {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": float(self.residual),
            "message": self.message,
            "p0": [float(x) for x in self.p0],
        }
        if tr is not None:
            Huu = [h.hessian_uu(q, p, u) for q, p, u in zip(tr.q, tr.p, tr.u)]
            negdef = [bool(np.all(np.linalg.eigvalsh(0.5 * (A + A.T)) < 0)) for A in Huu]
            doc.update(
                {
                    "J": float(tr.J),
                    "H0": float(tr.H[0]),
                    "H_drift": tr.h_drift,
                    "steps": tr.steps,
                    "qf": [float(x) for x in tr.q[-1]],
                    "pf": [float(x) for x in tr.p[-1]],
                    "maximum_condition": {
                        "negative_definite_fraction": float(np.mean(negdef)),
                        "note": "d2H/du2 < 0 indicates a local maximum of H in u",
                    },
                }
            )
        return doc


def _boundary_residual(problem: OcProblem, tr: Trajectory, transversality: bool) -> np.ndarray:
    fixed = problem.fixed_final
    r = [tr.q[-1, i] - problem.qf[i] for i in fixed]
    if transversality:
        r += [tr.p[-1, i] for i in range(problem.n) if i not in fixed]
    return np.asarray(r, dtype=float)


def shoot(
    problem: OcProblem,
    p0_guess=None,
    steps: int = 1000,
    tol: float = 1e-9,
    maxiter: int = 100,
    fd_step: float = 1e-6,
    transversality: bool = True,
    h: Hamiltonian | None = None,
) -> ShootResult:
    """Find the initial costate whose extremal meets the prescribed final state.

    The Jacobian is a forward finite difference and steps are least-squares
    (minimum norm) with backtracking.  Free final components get the
    condition p(tf) = 0 when ``transversality`` is on.  Without any
    prescribed final component the guess is integrated and returned as is.
    """
    h = h or build_hamiltonian(problem)
    if problem.q0 is None:
        raise ValueError("shooting needs q0")
    if problem.tf is None:
        raise ValueError("shooting needs a fixed final time")
    n = problem.n
    p0 = np.zeros(n) if p0_guess is None else np.array(p0_guess, dtype=float)
    args = (problem.q0, problem.t0, problem.tf, steps)

    def run(pv, guess=None):
        return integrate_hamilton(h, args[0], pv, args[1], args[2], args[3], guess)

    if not problem.fixed_final:
        tr = run(p0)
        return ShootResult(tr, p0, True, 0, 0.0, "no prescribed final state")

    def F(pv):
        try:
            tr = run(pv)
        except (IntegrationError, EliminationError, DomainError) as exc:
            return None, None, str(exc)
        return tr, _boundary_residual(problem, tr, transversality), ""

    tr, r, msg = F(p0)
    if tr is None:
        return ShootResult(None, p0, False, 0, float("inf"), msg)
    best = (tr, p0.copy(), float(np.max(np.abs(r))))
    for it in range(1, maxiter + 1):
        res = float(np.max(np.abs(r)))
        if res <= tol:
            return ShootResult(tr, p0, True, it - 1, res)
        Jac = np.empty((len(r), n))
        for j in range(n):
            dp = fd_step * max(1.0, abs(p0[j]))
            pj = p0.copy()
            pj[j] += dp
            trj, rj, msg = F(pj)
            if trj is None:
                pj[j] -= 2 * dp
                trj, rj, msg = F(pj)
                if trj is None:
                    return ShootResult(best[0], best[1], False, it, best[2], msg)
                dp = -dp
            Jac[:, j] = (rj - r) / dp
        step = np.linalg.lstsq(Jac, -r, rcond=None)[0]
        alpha = 1.0
        for _ in range(30):
            cand = p0 + alpha * step
            trc, rc, msg = F(cand)
            if trc is not None and np.max(np.abs(rc)) < res:
                break
            alpha *= 0.5
        else:
            return ShootResult(best[0], best[1], False, it, best[2], "line search failed")
        p0, tr, r = cand, trc, rc
        if float(np.max(np.abs(r))) < best[2]:
            best = (tr, p0.copy(), float(np.max(np.abs(r))))
    res = float(np.max(np.abs(r)))
    if res <= tol:
        return ShootResult(tr, p0, True, maxiter, res)
    return ShootResult(best[0], best[1], False, maxiter, best[2], "no convergence")
