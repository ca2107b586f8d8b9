import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from strategies import VARS, safe_trees

from ocgeom.symexpr import (
    DomainError,
    NonPolynomialError,
    ParseError,
    Polynomial,
    UnboundVariableError,
    call,
    const,
    differentiate,
    evaluate,
    free_variables,
    parse,
    polynomial_real_roots,
    real_roots_univariate,
    substitute,
    to_polynomial,
    unparse,
    var,
)

# -- parsing ----------------------------------------------------------------
def test_parse_train_hamiltonian():
    e = parse("p1*x2 + p2*u - 0.5*u^2")
    assert free_variables(e) == {"p1", "x2", "p2", "u"}
    assert evaluate(e, {"p1": 2, "x2": 1, "p2": 3, "u": 1}) == pytest.approx(4.5, abs=0)


def test_parse_constant_zero():
    e = parse("0")
    assert e.kind == "const" and e.value == 0.0


def test_parse_power_of_group():
    assert evaluate(parse("(u^2-1)^2"), {"u": 2}) == 9.0


@pytest.mark.parametrize(
    "src,value",
    [("2^3^1", 8.0), ("-2^2", -4.0), ("2*3+4", 10.0), ("2*(3+4)", 14.0), ("8/4/2", 1.0),
     ("1-2-3", -4.0), ("--3", 3.0), ("1e2 + .5", 100.5), ("2.5E-1", 0.25), ("x^(2)", 9.0)],
)
def test_precedence_and_literals(src, value):
    # note: the exponent is a literal, so 2^3^1 is not accepted as right-nested; see below
    if src == "2^3^1":
        with pytest.raises(ParseError):
            parse(src)
        return
    assert evaluate(parse(src), {"x": 3.0}) == pytest.approx(value)


@pytest.mark.parametrize(
    "src,pos",
    [("x +", 3), ("(x", 2), ("x ) ", 2), ("foo(x)", 0), ("x^y", 2), ("x^-1", 2), ("2 $ 3", 2), ("", 0)],
)
def test_parse_errors_carry_position(src, pos):
    with pytest.raises(ParseError) as info:
        parse(src)
    assert info.value.position == pos


def test_unknown_function_named():
    with pytest.raises(ParseError, match="tan"):
        parse("tan(x)")


@pytest.mark.parametrize(
    "src",
    ["x - (y - z)", "x/(y*z)", "-(x + y)", "(-x)^2", "(x^2)^3", "sin(x)^2",
     "-x^2", "2*-x", "x - -y", "x/(y/z)", "exp(-x)*log(y)", "1e-05*x", "(-3)^2"],
)
def test_roundtrip_structural(src):
    e = parse(src)
    assert parse(unparse(e)) == e


# random expression trees --------------------------------------------------
bindings = st.fixed_dictionaries({v: st.floats(-1.5, 1.5, allow_nan=False) for v in VARS})


@settings(max_examples=1000, deadline=None)
@given(safe_trees(), bindings, st.sampled_from(VARS))
def test_derivative_matches_central_difference(e, b, name):
    d = differentiate(e, name)
    h = 1e-6
    bp, bm = dict(b), dict(b)
    bp[name] += h
    bm[name] -= h
    fd = (evaluate(e, bp) - evaluate(e, bm)) / (2 * h)
    exact = evaluate(d, b)
    assert abs(exact - fd) <= 1e-6 * (1 + abs(exact)) + 1e-7 * (1 + abs(evaluate(e, b)))


@settings(max_examples=300, deadline=None)
@given(safe_trees(), safe_trees(), bindings, st.floats(-2, 2), st.floats(-2, 2))
def test_differentiation_is_linear(f, g, b, a, c):
    lhs = differentiate(const(a) * f + const(c) * g, "x")
    rhs_val = a * evaluate(differentiate(f, "x"), b) + c * evaluate(differentiate(g, "x"), b)
    assert evaluate(lhs, b) == pytest.approx(rhs_val, rel=1e-12, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(safe_trees())
def test_unparse_reparses_to_equal_tree(e):
    once = parse(unparse(e))
    assert parse(unparse(once)) == once
    b = {"x": 0.3, "y": -0.7, "z": 1.1}
    assert evaluate(once, b) == pytest.approx(evaluate(e, b), rel=1e-12, abs=1e-12)


def test_derivative_against_sympy_oracle(rng):
    sources = ["p*u - u^3/6", "(u^2-1)^2", "x*sin(y)^2/(1+x^2)", "exp(x*y) - log(2+y^2)", "sqrt(1+x^2)*cos(x)"]
    for src in sources:
        e = parse(src)
        s = sympy.sympify(src.replace("^", "**"))
        for name in sorted(free_variables(e)):
            ds = sympy.lambdify(sorted(free_variables(e)), sympy.diff(s, sympy.Symbol(name)))
            for _ in range(20):
                b = {v: float(rng.uniform(-1.5, 1.5)) for v in free_variables(e)}
                ours = evaluate(differentiate(e, name), b)
                theirs = float(ds(*[b[v] for v in sorted(b)]))
                assert ours == pytest.approx(theirs, rel=1e-12, abs=1e-12)


def test_derivative_examples():
    d = differentiate(parse("p*u - u^3/6"), "u")
    for u in (-2.0, 0.3, 1.7):
        assert evaluate(d, {"p": 0.4, "u": u}) == pytest.approx(0.4 - u * u / 2)
    assert differentiate(parse("c"), "x") == const(0.0)
    d = differentiate(parse("(u^2-1)^2"), "u")
    for u in (-2, -1, 0, 1, 2):
        assert evaluate(d, {"u": u}) == 4 * u * (u * u - 1)


# -- evaluation -------------------------------------------------------------
def test_evaluate_examples():
    assert evaluate(parse("7"), {}) == 7.0
    assert evaluate(parse("(u^2-1)^2"), {"u": 1}) == 0.0


@pytest.mark.parametrize("src,b", [("log(x)", {"x": 0.0}), ("log(x)", {"x": -1.0}), ("1/x", {"x": 0.0}),
                                   ("sqrt(x)", {"x": -1e-3}), ("exp(x)", {"x": 1e4})])
def test_domain_errors(src, b):
    with pytest.raises(DomainError):
        evaluate(parse(src), b)


def test_unbound_variable():
    with pytest.raises(UnboundVariableError, match="y"):
        evaluate(parse("x + y"), {"x": 1})


def test_substitute():
    e = substitute(parse("x*y + y"), {"y": parse("2*z")})
    assert evaluate(e, {"x": 3, "z": 1}) == 8.0


# -- polynomials and roots --------------------------------------------------
def test_roots_paper_cubic():
    assert real_roots_univariate(parse("p - 4*u*(u^2-1)"), "u", {"p": 0}) == pytest.approx([-1, 0, 1], abs=1e-14)


def test_roots_linear_examples():
    assert real_roots_univariate(parse("u - 2"), "u") == [2.0]
    assert real_roots_univariate(parse("p2 - u"), "u", {"p2": 0.3}) == pytest.approx([0.3])


def test_root_multiplicity():
    roots = real_roots_univariate(parse("(u-1)^2*(u+2)"), "u", multiplicity=True)
    assert [(round(r.value, 9), r.multiplicity) for r in roots] == [(-2.0, 1), (1.0, 2)]


def test_root_residual_contract():
    poly = to_polynomial(parse("p - 4*u*(u^2-1)"), "u", {"p": 24})
    roots = polynomial_real_roots(poly)
    assert [r.value for r in roots] == pytest.approx([2.0])
    bound = 1e-12 * (1 + max(abs(c) for c in poly.coefficients))
    assert all(abs(poly(r.value)) <= bound for r in roots)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=1, max_size=5))
def test_integer_roots_recovered(rs):
    coeffs = np.poly(rs)[::-1]  # monic, ascending
    roots = polynomial_real_roots(Polynomial("u", tuple(coeffs)))
    expect = sorted(set(rs))
    assert [r.value for r in roots] == pytest.approx(expect, abs=1e-10)
    assert sum(r.multiplicity for r in roots) == len(rs)


def test_nonpolynomial_and_degree_errors():
    with pytest.raises(NonPolynomialError):
        real_roots_univariate(parse("sin(u)"), "u")
    with pytest.raises(NonPolynomialError):
        real_roots_univariate(parse("1/u"), "u")
    with pytest.raises(NonPolynomialError):
        real_roots_univariate(parse("u^9 - 1"), "u")


def test_polynomial_invariants():
    p = Polynomial("u", (1.0, 2.0, 0.0, 0.0))
    assert p.degree == 1 and p.coefficients[-1] != 0
    assert Polynomial("u", (0.0, 0.0)).is_zero
    with pytest.raises(ValueError):
        polynomial_real_roots(Polynomial("u", (0.0,)))


def test_numeric_coefficient_subtrees_allowed():
    roots = real_roots_univariate(parse("cos(a)*u - 1"), "u", {"a": 0.0})
    assert roots == [1.0]


def test_constant_folding_identities():
    x = var("x")
    assert (x * 0) == const(0.0)
    assert (x + 0) is x
    assert call("sin", const(0.0)) == const(0.0)
    assert unparse(const(-0.0)) == "0"
    assert not math.copysign(1.0, const(-0.0).value) < 0
