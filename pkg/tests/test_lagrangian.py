import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocgeom.lagrangian import (
    LclPoint,
    LclPreconditionError,
    NormalFormError,
    build_reduced_chart,
    check_alpha_relation,
    check_energy_identity,
    check_geometry,
    check_tilde_inclusion,
    energy,
    lcl_residual,
    legendre,
    presymplectic_field,
)
from ocgeom.ocp import load_problem
from ocgeom.pontryagin import build_hamiltonian, dh_samples
from ocgeom.problems import EXAMPLES, load_example
from ocgeom.symexpr import evaluate

reals = st.floats(-2, 2, allow_nan=False)


def train_point(x1, x2, p1, u):
    return LclPoint([x1, x2], [x2, u], [0.0, -p1], [p1, u], [u])


def over_point(x, y, u1, u2):
    return LclPoint([x, y], [u1, 2 * u2], [0.0, 0.0], [u1, u2], [u1, u2, u2])


# -- L_C,L residuals ------------------------------------------------------------
@settings(max_examples=100, deadline=None)
@given(reals, reals)
def test_toy_lcl_points(r1, r2):
    prob = load_example("toy_tilde_c")
    # a = u1 - u2 and qdot = u1 + u2 fix the witness
    pt = LclPoint([0.0], [r1], [r2], [0.0], [(r1 + r2) / 2, (r1 - r2) / 2])
    assert np.max(np.abs(lcl_residual(prob, pt))) <= 1e-15


def test_toy_witness_is_unique():
    prob = load_example("toy_tilde_c")
    r1, r2, s = 0.8, 0.3, 0.1
    pt = LclPoint([0.0], [r1], [r2], [0.0], [s, r1 - s])
    assert np.max(np.abs(lcl_residual(prob, pt))) > 0.1


@settings(max_examples=100, deadline=None)
@given(reals, reals, reals, reals)
def test_train_lcl_points(x1, x2, p1, u):
    assert np.all(lcl_residual(load_example("train"), train_point(x1, x2, p1, u)) == 0)


@settings(max_examples=100, deadline=None)
@given(reals, reals, reals, reals)
def test_overactuated_lcl_points(x, y, u1, u2):
    assert np.all(lcl_residual(load_example("overactuated"), over_point(x, y, u1, u2)) == 0)


def test_residual_detects_perturbation(train):
    pt = train_point(0.1, 0.2, 0.3, 0.4)
    bad = LclPoint(pt.q, pt.qdot, pt.a, pt.b + np.array([1e-3, 0]), pt.u)
    assert np.max(np.abs(lcl_residual(train, bad))) == pytest.approx(1e-3)


# -- alpha relation ------------------------------------------------------------
@pytest.mark.parametrize("name", EXAMPLES)
def test_alpha_relation_on_dh_samples(name):
    prob = load_example(name)
    h = build_hamiltonian(prob)
    rep = check_alpha_relation(prob, dh_samples(h, 1000, seed=7))
    assert rep.ok and rep.total == 1000, rep.to_json()


def test_alpha_relation_bang_bang_closed_form():
    prob = load_example("bang_bang")
    pts = [[0.4, 4 * u * (u * u - 1), u, 0.0, u] for u in np.linspace(-2, 2, 41)]
    assert check_alpha_relation(prob, pts).ok


def test_alpha_relation_fails_on_perturbed_b(train_h):
    Z = dh_samples(train_h, 20, seed=2)
    Z[:, 2] += 1e-3  # p block becomes b after alpha
    rep = check_alpha_relation(train_h.problem, Z)
    assert rep.passed == 0 and not rep.ok


# -- Legendre and energy ---------------------------------------------------------
def test_train_legendre_and_energy(train):
    pt = train_point(0.5, -1.0, 2.0, 0.25)
    q, p = legendre(train, pt)
    assert q.tolist() == [0.5, -1.0] and p.tolist() == [2.0, 0.25]
    assert energy(train, pt) == pytest.approx(2.0 * -1.0 + 0.25**2 / 2, abs=1e-15)


def test_overactuated_legendre_and_energy():
    prob = load_example("overactuated")
    pt = over_point(0.3, 0.1, 1.5, -0.5)
    q, p = legendre(prob, pt)
    assert q.tolist() == [0.3, 0.1] and p.tolist() == [1.5, -0.5]
    assert energy(prob, pt) == pytest.approx(1.5**2 / 2 + 0.25, abs=1e-15)


def test_zero_cost_energy():
    prob = load_problem({"name": "z", "states": ["x"], "controls": ["u"], "dynamics": ["u"], "cost": "0"})
    assert energy(prob, LclPoint([1.0], [0.7], [0.0], [0.0], [0.7])) == 0.0


def test_legendre_precondition(train):
    pt = train_point(0.5, -1.0, 2.0, 0.25)
    off = LclPoint(pt.q, pt.qdot + 1e-3, pt.a, pt.b, pt.u)
    with pytest.raises(LclPreconditionError):
        legendre(train, off)
    with pytest.raises(LclPreconditionError):
        energy(train, off)


def test_energy_independent_of_witness():
    prob = load_example("u_squared")
    for u in (0.3, 1.2):
        plus = LclPoint([0.1], [u * u], [0.0], [0.0], [u])
        minus = LclPoint([0.1], [u * u], [0.0], [0.0], [-u])
        assert abs(energy(prob, plus) - energy(prob, minus)) <= 1e-10


@pytest.mark.parametrize("name", EXAMPLES)
def test_energy_identity(name):
    prob = load_example(name)
    h = build_hamiltonian(prob)
    pts = [LclPoint.from_dh(x, h.n, h.m) for x in dh_samples(h, 1000, seed=11)]
    rep = check_energy_identity(h, pts)
    assert rep.ok, rep.to_json()


@pytest.mark.parametrize("name", EXAMPLES)
def test_tilde_inclusion(name):
    prob = load_example(name)
    h = build_hamiltonian(prob)
    pts = [LclPoint.from_dh(x, h.n, h.m) for x in dh_samples(h, 500, seed=5)]
    rep = check_tilde_inclusion(prob, pts)
    assert rep.ok, rep.to_json()


@pytest.mark.parametrize("n", [1, 2, 3])
def test_geometry_identities(n):
    assert all(r.ok for r in check_geometry(n))


# -- reduced chart -------------------------------------------------------------
def test_train_chart_symbols():
    chart = build_reduced_chart(load_example("train"))
    assert chart.coordinates == ("x1", "x2", "p_x1", "u")
    om = [[evaluate(e, {}) for e in row] for row in chart.omega_expr]
    # dx1 ^ dp1 + dx2 ^ du, i.e. -dp1 ^ dx1 - du ^ dx2
    assert om == [[0, 0, 1, 0], [0, 0, 0, 1], [-1, 0, 0, 0], [0, -1, 0, 0]]
    rng = np.random.default_rng(1)
    for x1, x2, p1, u in rng.uniform(-2, 2, (20, 4)):
        E = evaluate(chart.energy_expr, {"x1": x1, "x2": x2, "p_x1": p1, "u": u})
        assert E == pytest.approx(p1 * x2 + u * u / 2, abs=1e-14)


def test_overactuated_chart_omega():
    chart = build_reduced_chart(load_example("overactuated"))
    assert set(chart.excess) == {"u2", "u3"}
    names = chart.coordinates
    ev = chart.evaluate(np.array([0.3, -0.2, 0.7, 1.1]))
    W = ev.omega
    i = {s: names.index(s) for s in names}
    # b2 = u2 plays the role of u2 in dx ^ du1 + dy ^ du2
    assert W[i["x"], i["u1"]] == 1 and W[i["y"], i["p_y"]] == 1
    assert np.count_nonzero(W) == 4
    assert ev.u.tolist() == [1.1, 0.7, 0.7]
    assert ev.E == pytest.approx(1.1**2 / 2 + 0.7**2, abs=1e-15)


@pytest.mark.parametrize("name", ["train", "overactuated", "u_cubed", "bang_bang", "lq_example"])
def test_omega_antisymmetric_and_chart_on_lcl(name, rng):
    if name == "lq_example":
        from ocgeom.pontryagin import random_lq

        prob = random_lq(2, 1, 3)
    else:
        prob = load_example(name)
    chart = build_reduced_chart(prob)
    for z in rng.uniform(-1.5, 1.5, (20, chart.dim)):
        ev = chart.evaluate(z)
        assert np.array_equal(ev.omega, -ev.omega.T)
        assert np.max(np.abs(lcl_residual(prob, chart.lcl_point(z)))) <= 1e-10


def test_toy_declined():
    with pytest.raises(NormalFormError):
        build_reduced_chart(load_example("toy_tilde_c"))


@settings(max_examples=100, deadline=None)
@given(reals, reals, reals, reals)
def test_train_field(x1, x2, p1, u):
    chart = build_reduced_chart(load_example("train"))
    sol = presymplectic_field(chart, np.array([x1, x2, p1, u]))
    assert sol.unique
    assert np.max(np.abs(sol.X - np.array([x2, u, 0.0, -p1]))) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(reals, reals, reals, reals)
def test_overactuated_field(x, y, b2, u1):
    chart = build_reduced_chart(load_example("overactuated"))
    sol = presymplectic_field(chart, np.array([x, y, b2, u1]))
    assert np.max(np.abs(sol.X - np.array([u1, 2 * b2, 0.0, 0.0]))) <= 1e-12


def test_constant_energy_gives_zero_field():
    prob = load_problem({"name": "c", "states": ["x"], "controls": ["u"], "dynamics": ["u"], "cost": "u - u"})
    chart = build_reduced_chart(prob)
    sol = presymplectic_field(chart, np.array([0.4, 0.0]))
    assert np.all(sol.X == 0) or np.max(np.abs(sol.X)) <= 1e-15


@pytest.mark.parametrize("name", ["train", "overactuated", "u_cubed", "bang_bang", "pendulum"])
def test_field_solves_contraction(name, rng):
    chart = build_reduced_chart(load_example(name))
    for z in rng.uniform(-1.5, 1.5, (30, chart.dim)):
        ev = chart.evaluate(z)
        X = presymplectic_field(chart, z).X
        assert np.max(np.abs(ev.omega.T @ X - ev.dE)) <= 1e-12 * (1 + np.max(np.abs(ev.dE)))
