"""Command-line interface: ``ocgeom analyze|solve|enumerate|check problem.json``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import integrability, lagrangian, pontryagin, solver
from .ocp import OcProblem, ProblemError, load_problem, tilde_control_constraints
from .symexpr import DomainError, ParseError, unparse

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_NO_SOLUTION = 3
EXIT_CHECK_FAILED = 4

COMMANDS = ("analyze", "solve", "enumerate", "check")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    problem: str
    samples: int = 1024
    seed: int = 0
    box: float = 2.0
    steps: int = 1000
    tol: float = 1e-9
    max_switches: int = 1
    mode: str | None = None
    probes: list[str] = field(default_factory=list)
    out: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        for name in ("samples", "steps"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name} must be positive")
        if self.seed < 0:
            raise UsageError("--seed must be nonnegative")
        if not (self.box > 0 and math.isfinite(self.box)):
            raise UsageError("--box must be positive")
        if not (self.tol > 0 and math.isfinite(self.tol)):
            raise UsageError("--tol must be positive")
        if self.max_switches < 0:
            raise UsageError("--max-switches must be nonnegative")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ocgeom", description="Geometric analysis and solution of optimal control problems.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("problem", help="problem file (JSON)")
    ap.add_argument("--samples", type=int, default=1024, help="number of sample points")
    ap.add_argument("--seed", type=int, default=0, help="seed for sampling")
    ap.add_argument("--box", type=float, default=2.0, help="sampling box half-width")
    ap.add_argument("--steps", type=int, default=1000, help="integration steps")
    ap.add_argument("--tol", type=float, default=1e-9, help="rank / solution tolerance")
    ap.add_argument("--max-switches", type=int, default=1, dest="max_switches")
    ap.add_argument("--mode", choices=("normal", "abnormal"), default=None)
    ap.add_argument("--probe", action="append", default=[], dest="probes", metavar="k=v,...",
                    help="extra sample point; unspecified coordinates are 0")
    ap.add_argument("--out", default=None, help="directory for report files")
    return ap


def parse_config(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    return RunConfig(**vars(ns))


# ---------------------------------------------------------------------------
# helpers
def clean(obj):
    """JSON-safe copy: no negative zeros, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {k: clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x + 0.0
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(doc) -> str:
    return json.dumps(clean(doc), indent=2) + "\n"


def parse_probe(text: str, h: pontryagin.Hamiltonian) -> list[float]:
    names = list(h.variables)
    alias = {}
    if h.n == 1:
        alias["p"] = h.costates[0]
        alias["q"] = h.states[0]
    if h.m == 1:
        alias["u"] = h.controls[0]
    point = dict.fromkeys(names, 0.0)
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise UsageError(f"probe entry {item!r} is not k=v")
        k, v = (s.strip() for s in item.split("=", 1))
        key = k if k in point else alias.get(k)
        if key is None:
            raise UsageError(f"probe names unknown coordinate {k!r}; known: {', '.join(names)}")
        try:
            point[key] = float(v)
        except ValueError:
            raise UsageError(f"probe value {v!r} is not a number") from None
    return [point[k] for k in names]


def _emit(doc, cfg: RunConfig, filename: str, stdout) -> None:
    text = dumps(doc)
    stdout.write(text)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text, encoding="utf-8")


def _load(cfg: RunConfig) -> OcProblem:
    problem = load_problem(Path(cfg.problem))
    if cfg.mode:
        problem = problem.with_mode(cfg.mode)
    return problem


# ---------------------------------------------------------------------------
# commands
def cmd_analyze(cfg: RunConfig, stdout=sys.stdout) -> int:
    problem = _load(cfg)
    h = pontryagin.build_hamiltonian(problem)
    probes = [parse_probe(s, h) for s in cfg.probes]
    X = pontryagin.sample_grid(h, cfg.samples, cfg.seed, cfg.box, probes)
    report = pontryagin.classify(h, X, cfg.tol)
    doc = report.to_json()
    doc["probes"] = [
        {
            "point": [float(v) for v in X[len(X) - len(probes) + i]],
            "rank": int(report.rank[len(X) - len(probes) + i]),
            "rank_uu": int(report.rank_uu[len(X) - len(probes) + i]),
            "morse_ok": bool(report.morse_ok[len(X) - len(probes) + i]),
            "regular": bool(report.regular[len(X) - len(probes) + i]),
            "caustic": bool(report.caustic[len(X) - len(probes) + i]),
        }
        for i in range(len(probes))
    ]
    try:
        levels = integrability.stabilize(h, seed=cfg.seed, box=cfg.box, tol=cfg.tol)
        doc["constraint_levels"] = [lv.to_json() for lv in levels]
    except (DomainError, np.linalg.LinAlgError) as exc:
        doc["constraint_levels"] = {"error": str(exc)}
    q_u = np.hstack([X[:, : h.n], X[:, 2 * h.n :]])
    tc = tilde_control_constraints(problem, q_u[: min(len(q_u), 64)])
    doc["tilde_c"] = {
        "symbolic_constraints": None if tc.symbolic is None else [unparse(e) for e in tc.symbolic],
        "flagged": int(sum(tc.flagged)),
        "checked": len(tc.flagged),
    }
    _emit(doc, cfg, "analysis.json", stdout)
    return EXIT_OK


def cmd_solve(cfg: RunConfig, stdout=sys.stdout) -> int:
    problem = _load(cfg)
    h = pontryagin.build_hamiltonian(problem)
    if problem.q0 is None or problem.tf is None:
        raise ProblemError("solve needs q0 and a fixed tf")
    res = solver.shoot(problem, steps=cfg.steps, tol=cfg.tol, h=h)
    doc = {"problem": problem.name, "mode": problem.mode, **res.summary(h)}
    _emit(doc, cfg, "solution.json", stdout)
    if cfg.out and res.trajectory is not None:
        res.trajectory.to_csv(Path(cfg.out) / "trajectory.csv")
    return EXIT_OK if res.converged else EXIT_NO_SOLUTION


def cmd_enumerate(cfg: RunConfig, stdout=sys.stdout) -> int:
    problem = _load(cfg)
    sols = integrability.enumerate_piecewise(problem, cfg.max_switches, cfg.tol)
    doc = {
        "problem": problem.name,
        "max_switches": cfg.max_switches,
        "count": len(sols),
        "solutions": [s.to_json() for s in sols],
    }
    _emit(doc, cfg, "enumeration.json", stdout)
    if cfg.out:
        for k, s in enumerate(sols):
            t, q, p, u = s.sample(cfg.steps)
            tr = solver.Trajectory(
                t, q[:, None], p[:, None], u[:, None], s.cost, np.full_like(t, s.hamiltonian),
                problem.states, pontryagin.costate_names(problem), problem.controls,
            )
            tr.to_csv(Path(cfg.out) / f"solution_{k}.csv")
    return EXIT_OK if sols else EXIT_NO_SOLUTION


def run_checks(problem: OcProblem, samples: int = 1024, seed: int = 0, box: float = 2.0) -> dict:
    """Identity suite: geometry, Hamiltonian, alpha relation, energy, tilde-C, reduced field."""
    reports: list[dict] = []
    for r in lagrangian.check_geometry(problem.n, seed=seed):
        reports.append(r.to_json())

    h_true = pontryagin.build_hamiltonian(problem)
    h = pontryagin.build_hamiltonian(problem, expression=problem.hamiltonian)
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-box, box, size=(samples, 2 * problem.n + problem.m))
    G = h.gradient_program.batch(Z)
    G0 = h_true.gradient_program.batch(Z)
    n = problem.n
    dyn_res = np.max(np.abs(G[:, n : 2 * n] - G0[:, n : 2 * n]), axis=1)
    reports.append(lagrangian._tally("hamiltonian_dp_equals_dynamics", dyn_res, 1e-12).to_json())
    h_res = np.abs(G[:, -1] - G0[:, -1])
    reports.append(lagrangian._tally("hamiltonian_definition", h_res, 1e-12).to_json())

    dh = pontryagin.dh_samples(h, samples, seed=seed, box=box)
    reports.append(lagrangian.check_alpha_relation(problem, dh, 1e-10).to_json())
    pts = [lagrangian.LclPoint.from_dh(x, problem.n, problem.m) for x in dh]
    good = [pt for pt in pts if np.max(np.abs(lagrangian.lcl_residual(problem, pt))) <= lagrangian.LCL_TOL]
    if good:
        reports.append(lagrangian.check_energy_identity(h, good, 1e-12).to_json())
        reports.append(lagrangian.check_tilde_inclusion(problem, good, 1e-8).to_json())
    else:
        for name in ("energy_identity", "tilde_inclusion"):
            reports.append(
                lagrangian.IdentityReport(name, 0, 0, float("inf"), 0.0, note="no sample lies on L_C,L").to_json()
            )

    if problem.mode == "normal":
        try:
            chart = lagrangian.build_reduced_chart(problem)
        except lagrangian.NormalFormError as exc:
            reports.append({"identity": "presymplectic_field", "skipped": True, "reason": str(exc)})
        else:
            res, leg = [], []
            for z in rng.uniform(-box, box, size=(min(samples, 256), chart.dim)):
                try:
                    sol = lagrangian.presymplectic_field(chart, z)
                    ev = chart.evaluate(z)
                    res.append(float(np.max(np.abs(ev.omega.T @ sol.X - ev.dE), initial=0.0))
                               / (1.0 + float(np.max(np.abs(ev.dE), initial=0.0))))
                    leg.append(float(np.max(np.abs(lagrangian.lcl_residual(problem, chart.lcl_point(z))))))
                except (lagrangian.PresymplecticObstruction, ArithmeticError):
                    res.append(float("inf"))
            reports.append(lagrangian._tally("presymplectic_field", res, 1e-12).to_json())
            reports.append(lagrangian._tally("reduced_chart_on_lcl", leg, 1e-10).to_json())
    ok = all(r.get("ok", True) for r in reports)
    return {"problem": problem.name, "mode": problem.mode, "samples": samples, "seed": seed,
            "ok": ok, "identities": reports}


def cmd_check(cfg: RunConfig, stdout=sys.stdout) -> int:
    problem = _load(cfg)
    doc = run_checks(problem, cfg.samples, cfg.seed, cfg.box)
    _emit(doc, cfg, "check.json", stdout)
    return EXIT_OK if doc["ok"] else EXIT_CHECK_FAILED


HANDLERS = {"analyze": cmd_analyze, "solve": cmd_solve, "enumerate": cmd_enumerate, "check": cmd_check}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        stderr.write(f"ocgeom: usage error: {exc}\n")
        return EXIT_USAGE
    try:
        return HANDLERS[cfg.command](cfg, stdout=stdout)
    except UsageError as exc:
        stderr.write(f"ocgeom: usage error: {exc}\n")
        return EXIT_USAGE
    except (ProblemError, ParseError, lagrangian.NormalFormError, pontryagin.NameCollisionError) as exc:
        stderr.write(f"ocgeom: invalid problem: {exc}\n")
        return EXIT_INVALID
    except (solver.IntegrationError, solver.EliminationError, DomainError) as exc:
        stderr.write(f"ocgeom: no solution: {exc}\n")
        return EXIT_NO_SOLUTION
