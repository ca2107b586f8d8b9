"""Small expression language: parsing, exact differentiation, evaluation.

Expressions are immutable trees.  The parser builds raw trees (no
rewriting) so that ``parse(unparse(parse(s)))`` is structurally equal to
``parse(s)``.  Trees produced by :func:`differentiate` and by the Python
operator overloads go through smart constructors that apply a handful of
local identities (``0*x -> 0``, ``x+0 -> x``, constant folding) and nothing
more.

Grammar::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := primary ('^' exponent)?
    exponent:= INTEGER | '(' INTEGER ')'
    primary := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ParseError",
    "UnboundVariableError",
    "DomainError",
    "NonPolynomialError",
    "Polynomial",
    "Root",
    "FUNCTIONS",
    "const",
    "var",
    "parse",
    "unparse",
    "differentiate",
    "evaluate",
    "substitute",
    "free_variables",
    "to_polynomial",
    "real_roots_univariate",
    "polynomial_real_roots",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")
BINARY = ("add", "sub", "mul", "div", "pow")
MAX_POLY_DEGREE = 8


class ParseError(ValueError):
    """Raised for malformed expression source; carries the offending offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnboundVariableError(KeyError):
    pass


class DomainError(ArithmeticError):
    pass


class NonPolynomialError(ValueError):
    pass


@dataclass(frozen=True)
class Expr:
    """Expression node.

    ``kind`` is one of ``const``, ``var``, ``neg``, ``add``, ``sub``,
    ``mul``, ``div``, ``pow`` or ``call``.  ``name`` holds the variable
    name for ``var`` and the function name for ``call``; ``value`` holds
    the number for ``const`` and the integer exponent for ``pow`` (whose
    second child is the same exponent as a constant node).
    """

    kind: str
    name: str = ""
    value: float = 0.0
    args: tuple["Expr", ...] = ()

    def __post_init__(self):
        arity = {"const": 0, "var": 0, "neg": 1, "call": 1}.get(self.kind, 2)
        if self.kind not in ("const", "var", "neg", "call") + BINARY:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if len(self.args) != arity:
            raise ValueError(f"{self.kind} node needs {arity} children")
        if self.kind == "var" and not self.name:
            raise ValueError("variable name must be nonempty")
        if self.kind == "call" and self.name not in FUNCTIONS:
            raise ValueError(f"unknown function {self.name!r}")

    # -- convenience ------------------------------------------------------
    @property
    def is_const(self) -> bool:
        return self.kind == "const"

    def __str__(self) -> str:
        return unparse(self)

    def __repr__(self) -> str:
        return f"Expr({unparse(self)!r})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k: int):
        return power(self, k)


def _lift(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return const(float(x))


def const(value: float) -> Expr:
    return Expr("const", value=float(value) + 0.0)  # no negative zero


def var(name: str) -> Expr:
    return Expr("var", name=name)


ZERO = const(0.0)
ONE = const(1.0)


def _is(e: Expr, v: float) -> bool:
    return e.kind == "const" and e.value == v


# -- smart constructors ---------------------------------------------------
def add(a: Expr, b: Expr) -> Expr:
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if b.kind == "neg":
        return sub(a, b.args[0])
    return Expr("add", args=(a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    if a.is_const and b.is_const:
        return const(a.value - b.value)
    if b.kind == "neg":
        return add(a, b.args[0])
    return Expr("sub", args=(a, b))


def neg(a: Expr) -> Expr:
    if a.is_const:
        return const(-a.value)
    if a.kind == "neg":
        return a.args[0]
    return Expr("neg", args=(a,))


def mul(a: Expr, b: Expr) -> Expr:
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if b.is_const:
        a, b = b, a
    if a.is_const and b.kind == "mul" and b.args[0].is_const:
        return mul(const(a.value * b.args[0].value), b.args[1])
    return Expr("mul", args=(a, b))


def div(a: Expr, b: Expr) -> Expr:
    if _is(b, 1.0):
        return a
    if _is(b, -1.0):
        return neg(a)
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    if a.is_const and b.is_const and b.value != 0.0:
        return const(a.value / b.value)
    if b.is_const and b.value != 0.0 and a.kind == "mul" and a.args[0].is_const:
        return mul(const(a.args[0].value / b.value), a.args[1])
    return Expr("div", args=(a, b))


def power(a: Expr, k: int) -> Expr:
    if int(k) != k or k < 0:
        raise ValueError("exponent must be a nonnegative integer")
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return a
    if a.is_const:
        return const(a.value**k)
    return Expr("pow", value=float(k), args=(a, const(k)))


def call(name: str, a: Expr) -> Expr:
    if a.is_const:
        try:
            return const(_apply(name, a.value))
        except DomainError:
            pass
    return Expr("call", name=name, args=(a,))


# -- parsing --------------------------------------------------------------
_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    end = len(source.rstrip())
    while pos < end:
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ParseError(f"unexpected character {source[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", end))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, value, pos = self.take()
        if value != text or kind != "op":
            raise ParseError(f"expected {text!r}, found {value or 'end of input'!r}", pos)

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            node = Expr("add" if op == "+" else "sub", args=(node, rhs))
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            node = Expr("mul" if op == "*" else "div", args=(node, rhs))
        return node

    def unary(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            inner = self.unary()
            if inner.kind == "const":
                return const(-inner.value)
            return Expr("neg", args=(inner,))
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            k = self.exponent()
            return Expr("pow", value=float(k), args=(base, const(k)))
        return base

    def exponent(self) -> int:
        kind, value, pos = self.take()
        paren = kind == "op" and value == "("
        if paren:
            kind, value, pos = self.take()
        if kind != "num" or not value.isdigit():
            raise ParseError("exponent must be a nonnegative integer literal", pos)
        if paren:
            self.expect(")")
        return int(value)

    def primary(self) -> Expr:
        kind, value, pos = self.take()
        if kind == "num":
            return const(float(value))
        if kind == "id":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    raise ParseError(f"unknown function {value!r}", pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Expr("call", name=value, args=(arg,))
            return var(value)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(f"unexpected {value or 'end of input'!r}", pos)


def parse(source: str) -> Expr:
    """Parse ``source`` into an expression tree.

    >>> evaluate(parse("(u^2-1)^2"), {"u": 2.0})
    9.0
    """
    p = _Parser(source)
    node = p.expr()
    kind, value, pos = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected {value!r}", pos)
    return node


# -- printing -------------------------------------------------------------
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_SYMBOL = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def unparse(e: Expr) -> str:
    """Render ``e`` in the input grammar; reparsing gives an equal tree."""
    if e.kind == "const" and e.value < 0:
        return "-" + _fmt_number(-e.value)
    return _unparse(e)


def _unparse(e: Expr) -> str:
    kind = e.kind
    if kind == "const":
        s = _fmt_number(abs(e.value))
        return f"(-{s})" if math.copysign(1.0, e.value) < 0 else s
    if kind == "var":
        return e.name
    if kind == "call":
        return f"{e.name}({_unparse(e.args[0])})"
    if kind == "neg":
        inner = e.args[0]
        s = _unparse(inner)
        if inner.kind in ("add", "sub", "mul", "div"):
            s = f"({s})"
        return f"-{s}"
    if kind == "pow":
        base = e.args[0]
        s = _unparse(base)
        if base.kind not in ("var", "call") and not base.is_const:
            s = f"({s})"
        return f"{s}^{int(e.value)}"
    a, b = e.args
    prec = _PREC[kind]
    sa, sb = _unparse(a), _unparse(b)
    if _PREC.get(a.kind, 9) < prec:
        sa = f"({sa})"
    # left-associative: an equal-precedence right operand needs parentheses
    if _PREC.get(b.kind, 9) <= prec:
        sb = f"({sb})"
    return f"{sa}{_SYMBOL[kind]}{sb}"


# -- evaluation -----------------------------------------------------------
def _apply(name: str, x: float) -> float:
    if name == "sin":
        return math.sin(x)
    if name == "cos":
        return math.cos(x)
    if name == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            raise DomainError(f"exp overflow at {x!r}") from None
    if name == "log":
        if x <= 0.0:
            raise DomainError(f"log of nonpositive value {x!r}")
        return math.log(x)
    if name == "sqrt":
        if x < 0.0:
            raise DomainError(f"sqrt of negative value {x!r}")
        return math.sqrt(x)
    raise ValueError(f"unknown function {name!r}")


def _eval(e: Expr, b: Mapping[str, float]) -> float:
    kind = e.kind
    if kind == "const":
        return e.value
    if kind == "var":
        try:
            return float(b[e.name])
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if kind == "neg":
        return -_eval(e.args[0], b)
    if kind == "call":
        return _apply(e.name, _eval(e.args[0], b))
    x = _eval(e.args[0], b)
    if kind == "pow":
        try:
            return x ** int(e.value)
        except OverflowError:
            raise DomainError("overflow in power") from None
    y = _eval(e.args[1], b)
    if kind == "add":
        return x + y
    if kind == "sub":
        return x - y
    if kind == "mul":
        return x * y
    if y == 0.0:
        raise DomainError("division by zero")
    return x / y


def evaluate(e: Expr, binding: Mapping[str, float]) -> float:
    """Evaluate ``e`` with every variable taken from ``binding``.

    Raises :class:`UnboundVariableError` for a missing variable and
    :class:`DomainError` for log/sqrt/division domain violations or a
    non-finite result.
    """
    value = _eval(e, binding)
    if not math.isfinite(value):
        raise DomainError(f"non-finite result {value!r}")
    return value


def free_variables(e: Expr) -> frozenset[str]:
    if e.kind == "var":
        return frozenset((e.name,))
    out: frozenset[str] = frozenset()
    for a in e.args:
        out |= free_variables(a)
    return out


def substitute(e: Expr, replacements: Mapping[str, Expr | float]) -> Expr:
    """Replace variables by expressions (or numbers), re-simplifying locally."""
    if e.kind == "var":
        r = replacements.get(e.name)
        return e if r is None else _lift(r)
    if e.kind == "const":
        return e
    args = [substitute(a, replacements) for a in e.args]
    return _rebuild(e, args)


def _rebuild(e: Expr, args: Sequence[Expr]) -> Expr:
    kind = e.kind
    if kind == "neg":
        return neg(args[0])
    if kind == "call":
        return call(e.name, args[0])
    if kind == "pow":
        return power(args[0], int(e.value))
    return {"add": add, "sub": sub, "mul": mul, "div": div}[kind](*args)


# -- differentiation ------------------------------------------------------
def differentiate(e: Expr, name: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to variable ``name``."""
    kind = e.kind
    if kind == "const":
        return ZERO
    if kind == "var":
        return ONE if e.name == name else ZERO
    if kind == "neg":
        return neg(differentiate(e.args[0], name))
    if kind == "call":
        a = e.args[0]
        da = differentiate(a, name)
        if _is(da, 0.0):
            return ZERO
        f = e.name
        if f == "sin":
            outer = call("cos", a)
        elif f == "cos":
            outer = neg(call("sin", a))
        elif f == "exp":
            outer = e
        elif f == "log":
            return div(da, a)
        else:  # sqrt
            return div(da, mul(const(2.0), e))
        return mul(outer, da)
    if kind == "pow":
        a = e.args[0]
        k = int(e.value)
        da = differentiate(a, name)
        return mul(mul(const(k), power(a, k - 1)), da)
    a, b = e.args
    da, db = differentiate(a, name), differentiate(b, name)
    if kind == "add":
        return add(da, db)
    if kind == "sub":
        return sub(da, db)
    if kind == "mul":
        return add(mul(da, b), mul(a, db))
    # quotient rule
    if _is(db, 0.0):
        return div(da, b)
    return div(sub(mul(da, b), mul(a, db)), power(b, 2))


# -- univariate polynomials -----------------------------------------------
def _padd(a: list[float], b: list[float]) -> list[float]:
    n = max(len(a), len(b))
    return [(a[i] if i < len(a) else 0.0) + (b[i] if i < len(b) else 0.0) for i in range(n)]


def _pmul(a: list[float], b: list[float]) -> list[float]:
    out = [0.0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x == 0.0:
            continue
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _trim(c: list[float]) -> list[float]:
    c = list(c)
    while len(c) > 1 and c[-1] == 0.0:
        c.pop()
    return c or [0.0]


@dataclass(frozen=True)
class Polynomial:
    """Real univariate polynomial, coefficients in ascending degree."""

    variable: str
    coefficients: tuple[float, ...]

    def __post_init__(self):
        c = _trim([float(x) for x in self.coefficients])
        object.__setattr__(self, "coefficients", tuple(c))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def is_zero(self) -> bool:
        return self.coefficients == (0.0,)

    def __call__(self, x):
        acc = 0.0 * x
        for c in reversed(self.coefficients):
            acc = acc * x + c
        return acc

    def derivative(self, order: int = 1) -> "Polynomial":
        c = list(self.coefficients)
        for _ in range(order):
            c = [i * c[i] for i in range(1, len(c))] or [0.0]
        return Polynomial(self.variable, tuple(c))


def to_polynomial(
    e: Expr, name: str, binding: Mapping[str, float] | None = None, max_degree: int = MAX_POLY_DEGREE
) -> Polynomial:
    """Expand ``e`` as a polynomial in ``name`` with other variables bound.

    Subtrees that do not mention ``name`` are evaluated numerically, so
    they may contain any function; subtrees that do mention it must be
    built from ``+ - *``, integer powers and division by such constants.
    """
    binding = dict(binding or {})
    coeffs = _poly(e, name, binding, max_degree)
    if len(_trim(coeffs)) - 1 > max_degree:
        raise NonPolynomialError(f"degree exceeds {max_degree}")
    return Polynomial(name, tuple(coeffs))


def _poly(e: Expr, name: str, b: dict, max_degree: int) -> list[float]:
    if name not in free_variables(e):
        return [evaluate(e, b)]
    kind = e.kind
    if kind == "var":
        return [0.0, 1.0]
    if kind == "neg":
        return [-c for c in _poly(e.args[0], name, b, max_degree)]
    if kind == "add":
        return _padd(_poly(e.args[0], name, b, max_degree), _poly(e.args[1], name, b, max_degree))
    if kind == "sub":
        rhs = [-c for c in _poly(e.args[1], name, b, max_degree)]
        return _padd(_poly(e.args[0], name, b, max_degree), rhs)
    if kind == "mul":
        out = _pmul(_poly(e.args[0], name, b, max_degree), _poly(e.args[1], name, b, max_degree))
    elif kind == "pow":
        base = _poly(e.args[0], name, b, max_degree)
        out = [1.0]
        for _ in range(int(e.value)):
            out = _trim(_pmul(out, base))
            if len(out) - 1 > max_degree:
                break
    elif kind == "div":
        den = e.args[1]
        if name in free_variables(den):
            raise NonPolynomialError(f"division by an expression in {name!r}")
        d = evaluate(den, b)
        if d == 0.0:
            raise DomainError("division by zero")
        return [c / d for c in _poly(e.args[0], name, b, max_degree)]
    else:
        raise NonPolynomialError(f"{e.name}() of an expression in {name!r} is not polynomial")
    out = _trim(out)
    if len(out) - 1 > max_degree:
        raise NonPolynomialError(f"degree exceeds {max_degree}")
    return out


class Root(NamedTuple):
    value: float
    multiplicity: int


def _newton(poly: Polynomial, x: float, iters: int = 60) -> float:
    dp = poly.derivative()
    best, best_r = x, abs(poly(x))
    for _ in range(iters):
        d = dp(x)
        if d == 0.0:
            break
        step = poly(x) / d
        x = x - step
        r = abs(poly(x))
        if r < best_r:
            best, best_r = x, r
        if step == 0.0 or abs(step) <= 1e-17 * max(1.0, abs(x)):
            break
    return best


def polynomial_real_roots(poly: Polynomial) -> list[Root]:
    """Real roots of ``poly`` with multiplicities, ascending.

    Companion-matrix eigenvalues give the candidates; near-real clusters
    are refined with Newton on the appropriate derivative and every root
    is kept only if the residual contract holds.
    """
    if poly.is_zero:
        raise ValueError("polynomial is identically zero; every real is a root")
    c = np.array(poly.coefficients, dtype=float)
    scale = float(np.max(np.abs(c)))
    tol = 1e-12 * (1.0 + scale)
    if poly.degree == 0:
        return []
    # drop numerically negligible leading terms
    while len(c) > 1 and abs(c[-1]) <= 1e-14 * scale:
        c = c[:-1]
    poly = Polynomial(poly.variable, tuple(c))
    if poly.degree == 0:
        return []
    z = np.roots(c[::-1])
    # single-linkage clusters in the complex plane; a k-fold root splits
    # into k eigenvalues spread by roughly eps**(1/k)
    order = np.argsort(z.real)
    groups: list[list[complex]] = []
    for w in z[order]:
        for g in groups:
            if min(abs(w - v) for v in g) <= 1e-2 * (1.0 + abs(w)):
                g.append(complex(w))
                break
        else:
            groups.append([complex(w)])
    clusters: list[list[float]] = []
    for g in groups:
        centre = np.mean(g)
        if abs(centre.imag) <= 1e-3 * (1.0 + abs(centre)):
            members = [w.real for w in g if abs(w.imag) <= 1e-3 * (1.0 + abs(w))] or [centre.real]
            clusters.append([centre.real] * len(g) if len(members) < len(g) else sorted(members))

    found: list[Root] = []
    for cl in clusters:
        k = len(cl)
        x0 = float(np.mean(cl))
        x = _newton(poly.derivative(k - 1), x0) if k > 1 else _newton(poly, x0)
        if abs(poly(x)) <= tol:
            found.append(Root(x, k))
            continue
        # cluster was not a genuine multiple root: try members one by one
        for xi in cl:
            xr = _newton(poly, xi)
            if abs(poly(xr)) <= tol:
                found.append(Root(xr, 1))

    merged: list[Root] = []
    for r in sorted(found):
        if merged and abs(r.value - merged[-1].value) <= 1e-9 * (1.0 + abs(r.value)):
            prev = merged[-1]
            keep = prev.value if abs(poly(prev.value)) <= abs(poly(r.value)) else r.value
            merged[-1] = Root(keep, prev.multiplicity + r.multiplicity)
        else:
            merged.append(r)
    return merged


def real_roots_univariate(
    e: Expr,
    name: str,
    binding: Mapping[str, float] | None = None,
    multiplicity: bool = False,
):
    """Real roots of ``e`` viewed as a polynomial in ``name``.

    Returns ascending floats, or :class:`Root` pairs when
    ``multiplicity`` is true.
    """
    roots = polynomial_real_roots(to_polynomial(e, name, binding))
    if multiplicity:
        return roots
    return [r.value for r in roots]


def parse_all(sources: Iterable[str]) -> list[Expr]:
    return [parse(s) for s in sources]
