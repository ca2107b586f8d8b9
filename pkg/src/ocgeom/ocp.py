"""Optimal control problems (C, Q, Gamma, L): model, validation, loading."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .kernels import Program, compile_exprs
from .symexpr import FUNCTIONS, Expr, ParseError, const, differentiate, free_variables, parse

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
MODES = ("normal", "abnormal")


class ProblemError(ValueError):
    """Invalid problem document or problem outside an operation's class."""


@dataclass(frozen=True)
class OcProblem:
    name: str
    states: tuple[str, ...]
    controls: tuple[str, ...]
    dynamics: tuple[Expr, ...]
    cost: Expr
    control_domain: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    t0: float = 0.0
    tf: float | None = 1.0
    q0: tuple[float, ...] | None = None
    qf: tuple[float | None, ...] | None = None
    mode: str = "normal"
    hamiltonian: Expr | None = None  # optional claimed Hamiltonian, checked by the identity suite

    def __post_init__(self):
        _validate(self)

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        return len(self.controls)

    @property
    def tf_free(self) -> bool:
        return self.tf is None

    @property
    def variables(self) -> tuple[str, ...]:
        return self.states + self.controls

    @property
    def fixed_final(self) -> list[int]:
        """Indices of final-state components that are prescribed."""
        if self.qf is None:
            return []
        return [i for i, v in enumerate(self.qf) if v is not None]

    def with_mode(self, mode: str) -> "OcProblem":
        from dataclasses import replace

        return replace(self, mode=mode)

    @cached_property
    def control_jacobian(self) -> tuple[tuple[Expr, ...], ...]:
        """dGamma/du as an n x m matrix of expressions."""
        return tuple(tuple(differentiate(g, u) for u in self.controls) for g in self.dynamics)

    @cached_property
    def state_jacobian(self) -> tuple[tuple[Expr, ...], ...]:
        return tuple(tuple(differentiate(g, q) for q in self.states) for g in self.dynamics)

    @cached_property
    def cost_gradient(self) -> tuple[tuple[Expr, ...], tuple[Expr, ...]]:
        """(dL/dq, dL/du)."""
        return (
            tuple(differentiate(self.cost, q) for q in self.states),
            tuple(differentiate(self.cost, u) for u in self.controls),
        )

    @cached_property
    def program(self) -> Program:
        """Compiled (Gamma, L, dGamma/dq, dGamma/du, dL/dq, dL/du) over (q, u)."""
        exprs = list(self.dynamics) + [self.cost]
        exprs += [e for row in self.state_jacobian for e in row]
        exprs += [e for row in self.control_jacobian for e in row]
        exprs += list(self.cost_gradient[0]) + list(self.cost_gradient[1])
        return compile_exprs(exprs, self.variables)

    def evaluate_data(self, q, u) -> dict[str, np.ndarray]:
        """Gamma, L and their first derivatives at one (q, u)."""
        n, m = self.n, self.m
        out = self.program(np.concatenate([np.asarray(q, float), np.asarray(u, float)]))
        k = 0
        gam = out[k : k + n]; k += n
        L = out[k]; k += 1
        gq = out[k : k + n * n].reshape(n, n); k += n * n
        gu = out[k : k + n * m].reshape(n, m); k += n * m
        Lq = out[k : k + n]; k += n
        Lu = out[k : k + m]
        return {"gamma": gam, "L": L, "dgamma_dq": gq, "dgamma_du": gu, "dL_dq": Lq, "dL_du": Lu}

    def in_control_domain(self, u, tol: float = 0.0) -> bool:
        for name, val in zip(self.controls, np.atleast_1d(u)):
            lo, hi = self.control_domain.get(name, (-math.inf, math.inf))
            if not (lo - tol <= val <= hi + tol):
                return False
        return True

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "states": list(self.states),
            "controls": list(self.controls),
            "dynamics": [str(g) for g in self.dynamics],
            "cost": str(self.cost),
            "boundary": {
                "t0": self.t0,
                "tf": self.tf,
                "q0": list(self.q0) if self.q0 is not None else None,
                "qf": list(self.qf) if self.qf is not None else None,
            },
            "mode": self.mode,
        }
        if self.control_domain:
            doc["control_domain"] = {k: list(v) for k, v in self.control_domain.items()}
        if self.hamiltonian is not None:
            doc["hamiltonian"] = str(self.hamiltonian)
        return doc


def _validate(p: OcProblem) -> None:
    if not isinstance(p.name, str):
        raise ProblemError("name must be a string")
    if len(p.states) < 1:
        raise ProblemError("at least one state is required")
    if len(p.controls) < 1:
        raise ProblemError("at least one control is required")
    names = list(p.states) + list(p.controls)
    for s in names:
        if not isinstance(s, str) or not _IDENT.match(s):
            raise ProblemError(f"invalid symbol name {s!r}")
        if s in FUNCTIONS:
            raise ProblemError(f"symbol name {s!r} shadows a function")
    dup = sorted({s for s in names if names.count(s) > 1})
    if dup:
        raise ProblemError(f"duplicate symbol names: {', '.join(dup)}")
    if len(p.dynamics) != len(p.states):
        raise ProblemError(f"dynamics has {len(p.dynamics)} components for {len(p.states)} states")
    declared = set(names)
    for label, e in [(f"dynamics[{i}]", g) for i, g in enumerate(p.dynamics)] + [("cost", p.cost)]:
        extra = sorted(free_variables(e) - declared)
        if extra:
            raise ProblemError(f"{label} uses undeclared symbol(s): {', '.join(extra)}")
    for name, bounds in p.control_domain.items():
        if name not in p.controls:
            raise ProblemError(f"control_domain names unknown control {name!r}")
        lo, hi = bounds
        if not lo <= hi:
            raise ProblemError(f"empty control interval for {name!r}")
    if p.mode not in MODES:
        raise ProblemError(f"mode must be one of {MODES}, got {p.mode!r}")
    if p.tf is not None and not p.t0 < p.tf:
        raise ProblemError("t0 must be smaller than tf")
    if p.q0 is not None and len(p.q0) != p.n:
        raise ProblemError(f"q0 has {len(p.q0)} entries for {p.n} states")
    if p.qf is not None and len(p.qf) != p.n:
        raise ProblemError(f"qf has {len(p.qf)} entries for {p.n} states")
    for label, vec in (("q0", p.q0), ("qf", p.qf)):
        for v in vec or ():
            if v is not None and not math.isfinite(v):
                raise ProblemError(f"{label} entries must be finite")


# ---------------------------------------------------------------------------
# loading
def _expr(source: Any, label: str) -> Expr:
    if isinstance(source, Expr):
        return source
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        return const(float(source))
    if not isinstance(source, str):
        raise ProblemError(f"{label} must be an expression string")
    try:
        return parse(source)
    except ParseError as exc:
        raise ProblemError(f"{label}: {exc}") from exc


def _number(x: Any, label: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ProblemError(f"{label} must be a number")
    return float(x)


def _read_document(document) -> dict:
    if isinstance(document, Mapping):
        return dict(document)
    if isinstance(document, Path):
        try:
            text = document.read_text(encoding="utf-8")
        except OSError as exc:
            raise ProblemError(f"cannot read problem file: {exc}") from exc
    elif isinstance(document, str):
        stripped = document.lstrip()
        if stripped.startswith("{"):
            text = document
        else:
            path = Path(document)
            if not path.is_file():
                raise ProblemError(f"no such problem file: {document}")
            text = path.read_text(encoding="utf-8")
    else:
        raise ProblemError(f"cannot load a problem from {type(document).__name__}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProblemError("problem document must be a JSON object")
    return doc


_KNOWN = {"name", "states", "controls", "dynamics", "cost", "control_domain", "boundary", "mode",
          "hamiltonian", "description"}


def load_problem(document) -> OcProblem:
    """Build a validated problem from a dict, JSON text, or a file path."""
    doc = _read_document(document)
    unknown = sorted(set(doc) - _KNOWN)
    if unknown:
        raise ProblemError(f"unknown field(s): {', '.join(unknown)}")
    for key in ("name", "states", "controls", "dynamics", "cost"):
        if key not in doc:
            raise ProblemError(f"missing field {key!r}")
    for key in ("states", "controls", "dynamics"):
        if not isinstance(doc[key], list):
            raise ProblemError(f"{key} must be an array")

    states = tuple(doc["states"])
    controls = tuple(doc["controls"])
    dynamics = tuple(_expr(g, f"dynamics[{i}]") for i, g in enumerate(doc["dynamics"]))
    cost = _expr(doc["cost"], "cost")

    domain: dict[str, tuple[float, float]] = {}
    raw_domain = doc.get("control_domain") or {}
    if not isinstance(raw_domain, dict):
        raise ProblemError("control_domain must be an object")
    for k, v in raw_domain.items():
        if not isinstance(v, list) or len(v) != 2:
            raise ProblemError(f"control_domain[{k!r}] must be [lo, hi]")
        lo = -math.inf if v[0] is None else _number(v[0], f"control_domain[{k!r}][0]")
        hi = math.inf if v[1] is None else _number(v[1], f"control_domain[{k!r}][1]")
        domain[k] = (lo, hi)

    b = doc.get("boundary", {})
    if not isinstance(b, dict):
        raise ProblemError("boundary must be an object")
    t0 = _number(b.get("t0", 0.0), "boundary.t0")
    tf_raw = b.get("tf", None)
    tf = None if tf_raw is None else _number(tf_raw, "boundary.tf")
    q0 = b.get("q0")
    if q0 is not None:
        if not isinstance(q0, list):
            raise ProblemError("boundary.q0 must be an array")
        q0 = tuple(_number(x, "boundary.q0") for x in q0)
    qf = b.get("qf")
    if qf is not None:
        if not isinstance(qf, list):
            raise ProblemError("boundary.qf must be an array")
        qf = tuple(None if x is None else _number(x, "boundary.qf") for x in qf)

    ham = doc.get("hamiltonian")
    ham_expr = None if ham is None else _expr(ham, "hamiltonian")
    problem = OcProblem(
        name=doc["name"],
        states=states,
        controls=controls,
        dynamics=dynamics,
        cost=cost,
        control_domain=domain,
        t0=t0,
        tf=tf,
        q0=q0,
        qf=qf,
        mode=doc.get("mode", "normal"),
        hamiltonian=ham_expr,
    )
    if ham_expr is not None:
        from .pontryagin import costate_names

        allowed = set(states) | set(controls) | set(costate_names(problem))
        extra = sorted(free_variables(ham_expr) - allowed)
        if extra:
            raise ProblemError(f"hamiltonian uses undeclared symbol(s): {', '.join(extra)}")
    return problem


# ---------------------------------------------------------------------------
# tilde-C
def normalize_basis(V: np.ndarray) -> np.ndarray:
    """Scale each column to max-abs 1 with its first nonzero entry positive."""
    V = np.array(V, dtype=float, copy=True)
    for j in range(V.shape[1]):
        col = V[:, j]
        big = np.max(np.abs(col))
        if big == 0.0:
            continue
        col = col / big
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            col = -col
        col[np.abs(col) <= 1e-15] = 0.0
        V[:, j] = col
    return V


def null_space(A: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Orthonormal-then-normalized kernel basis as columns; numeric rank at ``rtol``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    cols = A.shape[1]
    if A.size == 0:
        return np.eye(cols)
    _, s, vt = np.linalg.svd(A)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s >= rtol * smax)) if smax > 0 else 0
    V = vt[rank:].T
    if V.shape[1] == 1:
        return normalize_basis(V)
    return V


@dataclass
class TildeCReport:
    points: list[np.ndarray]
    kernels: list[np.ndarray]
    values: list[np.ndarray]
    flagged: list[bool]
    symbolic: list[Expr] | None

    @property
    def all_flagged(self) -> bool:
        return all(self.flagged)

    def to_json(self) -> dict:
        return {
            "points": [list(map(float, p)) for p in self.points],
            "kernels": [k.T.tolist() for k in self.kernels],
            "values": [list(map(float, v)) for v in self.values],
            "flagged": list(self.flagged),
            "symbolic": None if self.symbolic is None else [str(e) for e in self.symbolic],
        }


TILDE_TOL = 1e-9


def kernel_constraints(problem: OcProblem, q, u, rtol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """(kernel basis of dGamma/du, dL/du . V for every basis vector V)."""
    data = problem.evaluate_data(q, u)
    V = null_space(data["dgamma_du"], rtol)
    return V, data["dL_du"] @ V


def tilde_control_constraints(problem: OcProblem, samples: Sequence) -> TildeCReport:
    """Evaluate the tilde-C conditions dL(V) = 0, V in ker dGamma/du, at samples.

    Each sample is a vector (q..., u...).  When dGamma/du has constant
    entries the kernel is fixed and the constraints are also returned as
    expressions over (q, u).
    """
    n = problem.n
    points, kernels, values, flagged = [], [], [], []
    for s in samples:
        s = np.asarray(s, dtype=float)
        if s.shape != (n + problem.m,):
            raise ValueError(f"sample must have {n + problem.m} entries")
        V, vals = kernel_constraints(problem, s[:n], s[n:])
        points.append(s)
        kernels.append(V)
        values.append(vals)
        flagged.append(bool(np.all(np.abs(vals) <= TILDE_TOL)))

    symbolic = None
    jac = problem.control_jacobian
    if all(e.is_const for row in jac for e in row):
        A = np.array([[e.value for e in row] for row in jac])
        V = null_space(A)
        Lu = problem.cost_gradient[1]
        symbolic = []
        for j in range(V.shape[1]):
            acc = const(0.0)
            for a in range(problem.m):
                c = float(V[a, j])
                if c != 0.0:
                    acc = acc + (Lu[a] if c == 1.0 else const(c) * Lu[a])
            symbolic.append(acc)
    return TildeCReport(points, kernels, values, flagged, symbolic)
