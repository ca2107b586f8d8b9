import json

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from ocgeom.ocp import ProblemError, load_problem, null_space, tilde_control_constraints
from ocgeom.problems import example_path, load_example
from ocgeom.symexpr import evaluate


def doc(**over):
    base = {
        "name": "t",
        "states": ["x1", "x2"],
        "controls": ["u"],
        "dynamics": ["x2", "u"],
        "cost": "u^2/2",
        "boundary": {"t0": 0, "tf": 1, "q0": [0, 1], "qf": [0, 0]},
    }
    base.update(over)
    return base


def test_train_loads(train):
    assert (train.n, train.m) == (2, 1)
    assert [str(g) for g in train.dynamics] == ["x2", "u"]
    assert evaluate(train.cost, {"u": 3.0}) == 4.5
    assert train.q0 == (0.0, 1.0) and train.qf == (0.0, 0.0) and train.tf == 1.0


def test_overactuated_loads():
    p = load_example("overactuated")
    assert (p.n, p.m) == (2, 3)
    assert evaluate(p.dynamics[1], {"u1": 0, "u2": 2, "u3": 5}) == 7


def test_load_from_path_text_and_dict():
    path = example_path("train")
    a = load_problem(path)
    b = load_problem(str(path))
    c = load_problem(path.read_text())
    d = load_problem(json.loads(path.read_text()))
    assert a == b == c == d


def test_undeclared_symbol_is_named():
    with pytest.raises(ProblemError, match="z"):
        load_problem(doc(dynamics=["x2", "u + z"]))
    with pytest.raises(ProblemError, match="w"):
        load_problem(doc(cost="w*u"))


@pytest.mark.parametrize(
    "over,msg",
    [
        ({"dynamics": ["x2"]}, "components"),
        ({"boundary": {"t0": 1, "tf": 1, "q0": [0, 1]}}, "t0"),
        ({"boundary": {"t0": 0, "tf": 1, "q0": [0]}}, "q0"),
        ({"boundary": {"t0": 0, "tf": 1, "q0": [0, 0], "qf": [0, 0, 0]}}, "qf"),
        ({"states": []}, "state"),
        ({"controls": []}, "control"),
        ({"states": ["x1", "x1"]}, "duplicate"),
        ({"mode": "weird"}, "mode"),
        ({"control_domain": {"v": [0, 1]}}, "unknown control"),
        ({"control_domain": {"u": [1, 0]}}, "empty"),
        ({"extra": 1}, "unknown field"),
        ({"cost": "u^"}, "cost"),
        ({"states": ["sin", "x2"], "dynamics": ["x2", "u"]}, "shadows"),
    ],
)
def test_schema_violations(over, msg):
    with pytest.raises(ProblemError, match=msg):
        load_problem(doc(**over))


def test_missing_fields_and_bad_json(tmp_path):
    d = doc()
    del d["cost"]
    with pytest.raises(ProblemError, match="cost"):
        load_problem(d)
    with pytest.raises(ProblemError, match="JSON"):
        load_problem("{not json")
    with pytest.raises(ProblemError):
        load_problem(str(tmp_path / "missing.json"))


def test_free_final_time_and_partial_qf():
    p = load_problem(doc(boundary={"t0": 0, "tf": None, "q0": [0, 1], "qf": [None, 0]}))
    assert p.tf_free and p.fixed_final == [1]


def test_abnormal_mode_and_roundtrip(train):
    p = load_problem(doc(mode="abnormal"))
    assert p.mode == "abnormal"
    assert load_problem(train.to_document()) == train


def test_control_domain_defaults_unbounded(train):
    assert train.in_control_domain([1e9])
    bb = load_problem(doc(control_domain={"u": [-1, 1]}))
    assert bb.in_control_domain([1.0]) and not bb.in_control_domain([1.5])


# -- tilde-C -------------------------------------------------------------------
def test_toy_kernel_and_constraint():
    p = load_example("toy_tilde_c")
    rep = tilde_control_constraints(p, [(0.0, 0.3, -1.2), (0.5, 1.0, 1.0), (-2.0, 0.0, 0.0)])
    for V in rep.kernels:
        assert V.shape == (2, 1)
        assert V[:, 0] == pytest.approx([1.0, -1.0])
    assert [float(v[0]) for v in rep.values] == pytest.approx([0.0, 1.0, -4.0])
    assert rep.flagged == [True, False, False]
    (sym,) = rep.symbolic
    assert evaluate(sym, {"x": 1.5, "u1": 0.2, "u2": 9.0}) == pytest.approx(3.0)


def test_immersion_means_every_point_flagged(train, rng):
    samples = rng.uniform(-2, 2, size=(50, 3))
    rep = tilde_control_constraints(train, samples)
    assert rep.all_flagged
    assert all(V.shape[1] == 0 for V in rep.kernels)


def test_control_free_cost_is_flagged(rng):
    p = load_problem({"name": "c", "states": ["x"], "controls": ["u1", "u2"], "dynamics": ["u1*u2 + x"],
                      "cost": "x^2"})
    assert tilde_control_constraints(p, rng.uniform(-2, 2, size=(30, 3))).all_flagged


def test_overactuated_constraint_is_u2_minus_u3():
    p = load_example("overactuated")
    rep = tilde_control_constraints(p, [(0, 0, 1.0, 2.0, 2.0), (0, 0, 1.0, 2.0, 3.0)])
    assert rep.flagged == [True, False]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5))
@example([0.0, 5e-10, 0.0, 0.0, 0.0])
def test_kernel_vectors_annihilated(vals):
    p = load_problem({"name": "k", "states": ["x", "y"], "controls": ["a", "b", "c"],
                      "dynamics": ["a*x + sin(b)", "c*y - a^2"], "cost": "a*b + c"})
    rep = tilde_control_constraints(p, [vals])
    A = p.evaluate_data(vals[:2], vals[2:])["dgamma_du"]
    V = rep.kernels[0]
    assert V.shape[1] >= 1
    assert np.linalg.norm(A @ V) <= 1e-10 * (1 + np.linalg.norm(A, 2))


def test_null_space_rank():
    assert null_space(np.zeros((2, 3))).shape == (3, 3)
    assert null_space(np.eye(3)).shape == (3, 0)
