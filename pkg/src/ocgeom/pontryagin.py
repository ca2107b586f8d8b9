"""Pontryagin Hamiltonian, Morse-family rank test, residuals of L_H and D_H."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .kernels import Program, compile_exprs
from .ocp import OcProblem, ProblemError
from .symexpr import Expr, const, differentiate, unparse, var

COSTATE_PREFIX = "p_"


class NameCollisionError(ProblemError):
    pass


def costate_names(problem: OcProblem) -> tuple[str, ...]:
    return tuple(COSTATE_PREFIX + s for s in problem.states)


@dataclass(frozen=True)
class Hamiltonian:
    problem: OcProblem
    mode: str
    H: Expr
    dHdq: tuple[Expr, ...]
    dHdp: tuple[Expr, ...]
    dHdu: tuple[Expr, ...]

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def m(self) -> int:
        return self.problem.m

    @property
    def states(self) -> tuple[str, ...]:
        return self.problem.states

    @property
    def costates(self) -> tuple[str, ...]:
        return costate_names(self.problem)

    @property
    def controls(self) -> tuple[str, ...]:
        return self.problem.controls

    @property
    def variables(self) -> tuple[str, ...]:
        """Evaluation order (q, p, u)."""
        return self.states + self.costates + self.controls

    @cached_property
    def d2Hdu2(self) -> tuple[tuple[Expr, ...], ...]:
        return tuple(tuple(differentiate(g, v) for v in self.controls) for g in self.dHdu)

    @cached_property
    def gradient_program(self) -> Program:
        """(dH/dq, dH/dp, dH/du, H) over (q, p, u)."""
        return compile_exprs(list(self.dHdq + self.dHdp + self.dHdu) + [self.H], self.variables)

    @cached_property
    def flow_program(self) -> Program:
        """Layout consumed by :func:`kernels.rk4_hamilton`."""
        exprs = list(self.dHdp) + list(self.dHdq) + [self.problem.cost, self.H] + list(self.dHdu)
        exprs += [e for row in self.d2Hdu2 for e in row]
        return compile_exprs(exprs, self.variables)

    @cached_property
    def stationarity_program(self) -> Program:
        """(dH/du, rows of the Morse matrix flattened) over (q, p, u)."""
        M = morse_matrix(self)
        return compile_exprs(list(self.dHdu) + [e for row in M.entries for e in row], self.variables)

    def pack(self, q, p, u) -> np.ndarray:
        return np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)) for x in (q, p, u)])

    def value(self, q, p, u) -> float:
        return float(self.gradient_program(self.pack(q, p, u))[-1])

    def gradients(self, q, p, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n, m = self.n, self.m
        out = self.gradient_program(self.pack(q, p, u))
        return out[:n], out[n : 2 * n], out[2 * n : 2 * n + m]

    def hessian_uu(self, q, p, u) -> np.ndarray:
        m, n = self.m, self.n
        out = self.flow_program(self.pack(q, p, u))
        return out[2 * n + 2 + m :].reshape(m, m)


def build_hamiltonian(problem: OcProblem, mode: str | None = None, expression: Expr | None = None) -> Hamiltonian:
    """H = p.Gamma - L (normal) or p.Gamma (abnormal).

    ``expression`` replaces the constructed H (used to audit a claimed
    Hamiltonian); gradients are then taken of that expression.
    """
    mode = mode or problem.mode
    if mode not in ("normal", "abnormal"):
        raise ProblemError(f"unknown mode {mode!r}")
    clash = [s for s in problem.states + problem.controls if s.startswith(COSTATE_PREFIX)]
    if clash:
        raise NameCollisionError(
            f"symbol(s) {', '.join(clash)} use the reserved costate prefix {COSTATE_PREFIX!r}"
        )
    if expression is None:
        H = const(0.0)
        for pname, g in zip(costate_names(problem), problem.dynamics):
            H = H + var(pname) * g
        if mode == "normal":
            H = H - problem.cost
    else:
        H = expression
    return Hamiltonian(
        problem=problem,
        mode=mode,
        H=H,
        dHdq=tuple(differentiate(H, s) for s in problem.states),
        dHdp=tuple(differentiate(H, s) for s in costate_names(problem)),
        dHdu=tuple(differentiate(H, s) for s in problem.controls),
    )


# ---------------------------------------------------------------------------
# Morse matrix
@dataclass(frozen=True)
class MorseMatrix:
    """m x (2n+m) blocks [d2H/dq du | d2H/dp du | d2H/du2] as expressions."""

    entries: tuple[tuple[Expr, ...], ...]
    n: int
    m: int
    variables: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, 2 * self.n + self.m)

    @property
    def is_constant(self) -> bool:
        return all(e.is_const for row in self.entries for e in row)

    def blocks(self) -> tuple[tuple, tuple, tuple]:
        n = self.n
        qb = tuple(row[:n] for row in self.entries)
        pb = tuple(row[n : 2 * n] for row in self.entries)
        ub = tuple(row[2 * n :] for row in self.entries)
        return qb, pb, ub

    @cached_property
    def program(self) -> Program:
        return compile_exprs([e for row in self.entries for e in row], self.variables)

    def evaluate(self, point) -> np.ndarray:
        return self.program(np.asarray(point, dtype=float)).reshape(self.shape)

    def evaluate_batch(self, X) -> np.ndarray:
        out = self.program.batch(X)
        return out.reshape((out.shape[0],) + self.shape)

    def render(self) -> list[list[str]]:
        return [[unparse(e) for e in row] for row in self.entries]


def morse_matrix(h: Hamiltonian) -> MorseMatrix:
    cols = h.states + h.costates + h.controls
    entries = tuple(tuple(differentiate(g, c) for c in cols) for g in h.dHdu)
    return MorseMatrix(entries, h.n, h.m, h.variables)


# ---------------------------------------------------------------------------
# sampling
def sample_grid(
    h: Hamiltonian,
    samples: int = 1024,
    seed: int = 0,
    box: float = 2.0,
    probes: Sequence[Sequence[float]] = (),
    include_center: bool = True,
) -> np.ndarray:
    """Deterministic points of (q, p, u): box center, scrambled Halton, then probes."""
    d = 2 * h.n + h.m
    rows = []
    k = samples
    if include_center and samples > 0:
        rows.append(np.zeros((1, d)))
        k -= 1
    if k > 0:
        gen = qmc.Halton(d, scramble=True, seed=seed)
        rows.append(box * (2.0 * gen.random(k) - 1.0))
    if len(probes):
        P = np.atleast_2d(np.asarray(probes, dtype=float))
        if P.shape[1] != d:
            raise ValueError(f"probe points need {d} coordinates")
        rows.append(P)
    return np.vstack(rows) if rows else np.empty((0, d))


def numeric_ranks(M: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ranks of stacked matrices and of their trailing square block.

    Singular values count when >= tol * sigma_max of the full matrix.
    Returns (rank, rank of the square block, sigma_min of the square block).
    """
    m = M.shape[1]
    s = np.linalg.svd(M, compute_uv=False)
    smax = s[:, 0]
    thresh = (tol * smax)[:, None]
    live = smax > 0
    rank = np.where(live, np.sum(s >= thresh, axis=1), 0)
    su = np.linalg.svd(M[:, :, -m:], compute_uv=False)
    rank_u = np.where(live, np.sum(su >= thresh, axis=1), 0)
    return rank, rank_u, su[:, -1]


@dataclass
class MorseReport:
    problem: str
    mode: str
    hamiltonian: str
    matrix: list[list[str]]
    certificate: str
    tol: float
    points: np.ndarray
    rank: np.ndarray
    rank_uu: np.ndarray
    morse_ok: np.ndarray
    regular: np.ndarray
    caustic: np.ndarray
    nonfinite: np.ndarray
    m: int = 1
    variables: tuple[str, ...] = field(default_factory=tuple)

    @property
    def morse_family(self) -> str:
        return "all-sampled" if bool(np.all(self.morse_ok)) else "fails-at-listed-points"

    @property
    def regularity(self) -> str:
        if bool(np.all(self.regular)):
            return "regular"
        if not bool(np.any(self.regular)):
            return "singular"
        return "mixed"

    @property
    def failing_points(self) -> np.ndarray:
        return self.points[~self.morse_ok]

    @property
    def caustic_points(self) -> np.ndarray:
        return self.points[self.caustic]

    def counts(self) -> dict[str, int]:
        return {
            "samples": int(len(self.points)),
            "morse_ok": int(np.sum(self.morse_ok)),
            "regular": int(np.sum(self.regular)),
            "caustic": int(np.sum(self.caustic)),
            "morse_failures": int(np.sum(~self.morse_ok)),
            "nonfinite": int(np.sum(self.nonfinite)),
        }

    def to_json(self, include_samples: bool = True) -> dict:
        def pts(P):
            return [[float(x) for x in row] for row in P]

        doc = {
            "problem": self.problem,
            "mode": self.mode,
            "variables": list(self.variables),
            "hamiltonian": self.hamiltonian,
            "morse_matrix": self.matrix,
            "certificate": self.certificate,
            "tol": self.tol,
            "verdict": {"morse_family": self.morse_family, "regularity": self.regularity},
            "counts": self.counts(),
            "failing_points": pts(self.failing_points),
            "caustic_points": pts(self.caustic_points),
        }
        if include_samples:
            doc["samples"] = [
                {
                    "point": [float(x) for x in self.points[i]],
                    "rank": int(self.rank[i]),
                    "rank_uu": int(self.rank_uu[i]),
                    "morse_ok": bool(self.morse_ok[i]),
                    "regular": bool(self.regular[i]),
                    "caustic": bool(self.caustic[i]),
                }
                for i in range(len(self.points))
            ]
        return doc


def classify(h: Hamiltonian, samples, tol: float = 1e-9) -> MorseReport:
    """Rank test of the Morse matrix at each sample of (q, p, u)."""
    M = morse_matrix(h)
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[1] != 2 * h.n + h.m:
        raise ValueError(f"samples need {2 * h.n + h.m} coordinates")
    vals = M.evaluate_batch(X)
    finite = np.all(np.isfinite(vals), axis=(1, 2))
    safe = np.where(finite[:, None, None], vals, 0.0)
    rank, rank_u, _ = numeric_ranks(safe, tol)
    rank = np.where(finite, rank, 0)
    rank_u = np.where(finite, rank_u, 0)
    morse_ok = rank == h.m
    regular = rank_u == h.m
    return MorseReport(
        problem=h.problem.name,
        mode=h.mode,
        hamiltonian=unparse(h.H),
        matrix=M.render(),
        certificate="constant-matrix" if M.is_constant else "sampled",
        tol=tol,
        points=X,
        rank=rank,
        rank_uu=rank_u,
        morse_ok=morse_ok,
        regular=regular,
        caustic=morse_ok & ~regular,
        nonfinite=~finite,
        m=h.m,
        variables=h.variables,
    )


# ---------------------------------------------------------------------------
# residual systems
def _split(point, sizes: Sequence[int]) -> list[np.ndarray]:
    if isinstance(point, (tuple, list)) and len(point) == len(sizes) and not np.isscalar(point[0]):
        blocks = [np.atleast_1d(np.asarray(b, dtype=float)) for b in point]
    else:
        flat = np.asarray(point, dtype=float).ravel()
        if flat.size != sum(sizes):
            raise ValueError(f"point needs {sum(sizes)} coordinates, got {flat.size}")
        blocks = np.split(flat, np.cumsum(sizes)[:-1])
    for b, k in zip(blocks, sizes):
        if b.size != k:
            raise ValueError("point block has the wrong dimension")
    return blocks


def lh_residual(h: Hamiltonian, point) -> np.ndarray:
    """(P_q - dH/dq, P_p - dH/dp, dH/du) at point (q, p, P_q, P_p, u)."""
    n, m = h.n, h.m
    q, p, Pq, Pp, u = _split(point, (n, n, n, n, m))
    Hq, Hp, Hu = h.gradients(q, p, u)
    return np.concatenate([Pq - Hq, Pp - Hp, Hu])


def dh_residual(h: Hamiltonian, point) -> np.ndarray:
    """(V_q - dH/dp, V_p + dH/dq, dH/du) at point (q, p, V_q, V_p, u)."""
    n, m = h.n, h.m
    q, p, Vq, Vp, u = _split(point, (n, n, n, n, m))
    Hq, Hp, Hu = h.gradients(q, p, u)
    return np.concatenate([Vq - Hp, Vp + Hq, Hu])


def project_stationary(h: Hamiltonian, X, iters: int = 60, tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton projection of (q, p, u) rows onto dH/du = 0.

    Minimum-norm steps use the pseudo-inverse of the Morse matrix, which
    has full row rank wherever the Morse condition holds.  Returns the
    projected rows and a boolean mask of those that converged.
    """
    X = np.array(np.atleast_2d(X), dtype=float, copy=True)
    m, d = h.m, 2 * h.n + h.m
    prog = h.stationarity_program
    done = np.zeros(len(X), dtype=bool)
    for _ in range(iters):
        out = prog.batch(X)
        C = out[:, :m]
        J = out[:, m:].reshape(-1, m, d)
        ok = np.all(np.isfinite(out), axis=1)
        scale = 1.0 + np.max(np.abs(X), axis=1)
        done = ok & (np.max(np.abs(C), axis=1) <= tol * scale)
        active = ok & ~done
        if not np.any(active):
            break
        step = np.einsum("nij,nj->ni", np.linalg.pinv(J[active]), C[active])
        X[active] -= step
    out = prog.batch(X)
    C = out[:, :m]
    scale = 1.0 + np.max(np.abs(X), axis=1)
    done = np.all(np.isfinite(out), axis=1) & (np.max(np.abs(C), axis=1) <= 1e2 * tol * scale)
    return X, done


def dh_samples(h: Hamiltonian, count: int, seed: int = 0, box: float = 2.0) -> np.ndarray:
    """Random points (q, p, V_q, V_p, u) of D_H, ``count`` rows."""
    rng = np.random.default_rng(seed)
    d = 2 * h.n + h.m
    got: list[np.ndarray] = []
    have = 0
    for _ in range(20):
        X, ok = project_stationary(h, rng.uniform(-box, box, size=(max(count, 16), d)))
        got.append(X[ok])
        have += int(np.sum(ok))
        if have >= count:
            break
    Z = np.vstack(got)[:count]
    if len(Z) < count:
        raise RuntimeError(f"only {len(Z)} of {count} samples reached dH/du = 0")
    n = h.n
    G = h.gradient_program.batch(Z)
    Hq, Hp = G[:, :n], G[:, n : 2 * n]
    return np.hstack([Z[:, :n], Z[:, n : 2 * n], Hp, -Hq, Z[:, 2 * n :]])


# ---------------------------------------------------------------------------
# linear-quadratic family
def _lin(coeffs: np.ndarray, names: Sequence[str]) -> Expr:
    acc = const(0.0)
    for c, s in zip(coeffs, names):
        if c != 0.0:
            acc = acc + const(float(c)) * var(s)
    return acc


def lq_problem(A, B, P, Q, R, name: str = "lq") -> OcProblem:
    """q' = A q + B u with L = u'Pu/2 + q'Qu + q'Rq/2."""
    A, B, P, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, P, Q, R))
    n, m = B.shape
    if A.shape != (n, n) or P.shape != (m, m) or Q.shape != (n, m) or R.shape != (n, n):
        raise ValueError("inconsistent LQ matrix sizes")
    xs = [f"x{i + 1}" for i in range(n)]
    us = [f"u{a + 1}" for a in range(m)]
    dyn = tuple(_lin(A[i], xs) + _lin(B[i], us) for i in range(n))
    cost = const(0.0)
    for a in range(m):
        for b in range(m):
            if P[a, b] != 0.0:
                cost = cost + const(0.5 * P[a, b]) * var(us[a]) * var(us[b])
    for i in range(n):
        for a in range(m):
            if Q[i, a] != 0.0:
                cost = cost + const(float(Q[i, a])) * var(xs[i]) * var(us[a])
        for j in range(n):
            if R[i, j] != 0.0:
                cost = cost + const(0.5 * R[i, j]) * var(xs[i]) * var(xs[j])
    return OcProblem(
        name=name,
        states=tuple(xs),
        controls=tuple(us),
        dynamics=dyn,
        cost=cost,
        t0=0.0,
        tf=1.0,
        q0=tuple([0.0] * n),
        qf=None,
    )


def random_lq(n: int, m: int, seed: int, singular: bool = False) -> OcProblem:
    """Random LQ instance; ``singular`` sets P = 0, otherwise P is invertible."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    Q = rng.normal(size=(n, m))
    R = rng.normal(size=(n, n))
    R = R + R.T
    if singular:
        P = np.zeros((m, m))
    else:
        G = rng.normal(size=(m, m))
        P = G @ G.T + m * np.eye(m)
    return lq_problem(A, B, P, Q, R, name=f"lq-{'singular' if singular else 'regular'}-{seed}")
