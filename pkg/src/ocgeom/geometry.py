"""Canonical structures on iterated tangent/cotangent bundles, in coordinates.

Every map here is a block permutation with sign flips acting on coordinate
vectors of a single Darboux chart.  Two-forms are stored as constant
antisymmetric matrices with the convention ``omega(x, y) = x @ W @ y`` so
that ``dq ^ dp`` has ``W[q, p] = 1`` and ``W[p, q] = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHART_ARITY = {"TQ": 2, "T*Q": 2, "TT*Q": 4, "T*TQ": 4, "TTQ": 4, "T*T*Q": 4}
CHART_BLOCKS = {
    "TQ": ("q", "v"),
    "T*Q": ("q", "p"),
    "TT*Q": ("q", "p", "qdot", "pdot"),
    "T*TQ": ("q", "v", "a", "b"),
    "TTQ": ("q", "v", "qdot", "vdot"),
    "T*T*Q": ("q", "p", "A", "B"),
}


class ChartError(ValueError):
    pass


@dataclass(frozen=True)
class ChartPoint:
    chart: str
    coords: tuple
    n: int

    def __post_init__(self):
        if self.chart not in CHART_ARITY:
            raise ChartError(f"unknown chart {self.chart!r}")
        if self.n < 1:
            raise ChartError("n must be positive")
        coords = tuple(self.coords)
        if len(coords) != CHART_ARITY[self.chart] * self.n:
            raise ChartError(
                f"{self.chart} point with n={self.n} needs "
                f"{CHART_ARITY[self.chart] * self.n} coordinates, got {len(coords)}"
            )
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_blocks(cls, chart: str, *blocks) -> "ChartPoint":
        blocks = [np.atleast_1d(np.asarray(b)).tolist() for b in blocks]
        return cls(chart, tuple(x for b in blocks for x in b), len(blocks[0]))

    def block(self, k: int) -> tuple:
        return self.coords[k * self.n : (k + 1) * self.n]

    def blocks(self) -> tuple[tuple, ...]:
        return tuple(self.block(k) for k in range(CHART_ARITY[self.chart]))

    def __getitem__(self, name: str) -> tuple:
        return self.block(CHART_BLOCKS[self.chart].index(name))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


def _require(pt: ChartPoint, chart: str) -> None:
    if not isinstance(pt, ChartPoint) or pt.chart != chart:
        got = pt.chart if isinstance(pt, ChartPoint) else type(pt).__name__
        raise ChartError(f"expected a {chart} point, got {got}")


def _neg(block: tuple) -> tuple:
    return tuple(-x for x in block)


def kappa(pt: ChartPoint) -> ChartPoint:
    """Canonical involution of TTQ: swap the v and qdot blocks."""
    _require(pt, "TTQ")
    q, v, qd, vd = pt.blocks()
    return ChartPoint("TTQ", q + qd + v + vd, pt.n)


def alpha(pt: ChartPoint) -> ChartPoint:
    """TT*Q -> T*TQ, (q, p, qdot, pdot) -> (q, qdot, pdot, p)."""
    _require(pt, "TT*Q")
    q, p, qd, pd = pt.blocks()
    return ChartPoint("T*TQ", q + qd + pd + p, pt.n)


def alpha_inverse(pt: ChartPoint) -> ChartPoint:
    _require(pt, "T*TQ")
    q, v, a, b = pt.blocks()
    return ChartPoint("TT*Q", q + b + v + a, pt.n)


def flat(pt: ChartPoint) -> ChartPoint:
    """TT*Q -> T*T*Q, (q, p, qdot, pdot) -> (q, p, -pdot, qdot)."""
    _require(pt, "TT*Q")
    q, p, qd, pd = pt.blocks()
    return ChartPoint("T*T*Q", q + p + _neg(pd) + qd, pt.n)


def sharp(pt: ChartPoint) -> ChartPoint:
    """T*T*Q -> TT*Q, inverse of :func:`flat`."""
    _require(pt, "T*T*Q")
    q, p, A, B = pt.blocks()
    return ChartPoint("TT*Q", q + p + B + _neg(A), pt.n)


# ---------------------------------------------------------------------------
# matrices of the maps (integer, acting on stacked coordinate vectors)
def _block_matrix(n: int, layout: list[tuple[int, int, int]], k: int = 4) -> np.ndarray:
    """``layout`` lists (target block, source block, sign)."""
    M = np.zeros((k * n, k * n), dtype=np.int64)
    eye = np.eye(n, dtype=np.int64)
    for t, s, sign in layout:
        M[t * n : (t + 1) * n, s * n : (s + 1) * n] = sign * eye
    return M


def kappa_matrix(n: int) -> np.ndarray:
    return _block_matrix(n, [(0, 0, 1), (1, 2, 1), (2, 1, 1), (3, 3, 1)])


def alpha_matrix(n: int) -> np.ndarray:
    return _block_matrix(n, [(0, 0, 1), (1, 2, 1), (2, 3, 1), (3, 1, 1)])


def flat_matrix(n: int) -> np.ndarray:
    return _block_matrix(n, [(0, 0, 1), (1, 1, 1), (2, 3, -1), (3, 2, 1)])


def sharp_matrix(n: int) -> np.ndarray:
    return _block_matrix(n, [(0, 0, 1), (1, 1, 1), (2, 3, 1), (3, 2, -1)])


# ---------------------------------------------------------------------------
# constant two-forms
class SymplecticMatrix:
    """Antisymmetric nondegenerate matrix of a constant-coefficient 2-form."""

    def __init__(self, entries):
        W = np.asarray(entries)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] % 2:
            raise ValueError("a symplectic matrix must be square of even size")
        if not np.array_equal(W, -W.T):
            raise ValueError("matrix is not antisymmetric")
        if abs(np.linalg.det(W.astype(float))) < 1e-12:
            raise ValueError("matrix is degenerate")
        self.entries = W
        self.entries.setflags(write=False)

    @property
    def dimension(self) -> int:
        return self.entries.shape[0]

    def __call__(self, x, y) -> float:
        return np.asarray(x) @ self.entries @ np.asarray(y)

    def __eq__(self, other) -> bool:
        return isinstance(other, SymplecticMatrix) and np.array_equal(self.entries, other.entries)

    def __repr__(self) -> str:
        return f"SymplecticMatrix({self.entries.tolist()})"


def _wedge_pairs(n: int, k: int, pairs: list[tuple[int, int]]) -> SymplecticMatrix:
    """Sum over i of d(block a)^i ^ d(block b)^i for every (a, b) in ``pairs``."""
    W = np.zeros((k * n, k * n), dtype=np.int64)
    for a, b in pairs:
        for i in range(n):
            W[a * n + i, b * n + i] += 1
            W[b * n + i, a * n + i] -= 1
    return SymplecticMatrix(W)


def omega_cotangent(n: int) -> SymplecticMatrix:
    """dq ^ dp on T*Q with coordinates (q, p)."""
    return _wedge_pairs(n, 2, [(0, 1)])


def tangent_lift_omega(n: int) -> SymplecticMatrix:
    """d_T omega = dqdot ^ dp + dq ^ dpdot on TT*Q, coordinates (q, p, qdot, pdot)."""
    return _wedge_pairs(n, 4, [(2, 1), (0, 3)])


def omega_TQ(n: int) -> SymplecticMatrix:
    """Canonical form of T*TQ, coordinates (q, v, a, b): dq ^ da + dv ^ db."""
    return _wedge_pairs(n, 4, [(0, 2), (1, 3)])


def omega_TstarTstarQ(n: int) -> SymplecticMatrix:
    """Canonical form of T*T*Q, coordinates (q, p, A, B): dq ^ dA + dp ^ dB."""
    return _wedge_pairs(n, 4, [(0, 2), (1, 3)])


@dataclass(frozen=True)
class SymplectomorphismCheck:
    holds: bool
    sign: int  # +1, -1, or 0 when neither

    def __bool__(self) -> bool:
        return self.holds


def _exact(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind in "iub":
        return a.astype(object)
    if a.dtype.kind == "f" and np.all(a == np.round(a)):
        return np.round(a).astype(np.int64).astype(object)
    return a


def check_symplectomorphism(M, source, target) -> SymplectomorphismCheck:
    """Does ``M`` pull the target form back to plus or minus the source form?

    Comparison is entrywise exact; integer inputs are handled with Python
    integers so no tolerance enters.
    """
    Ws = source.entries if isinstance(source, SymplecticMatrix) else np.asarray(source)
    Wt = target.entries if isinstance(target, SymplecticMatrix) else np.asarray(target)
    M = np.asarray(M)
    if M.ndim != 2 or M.shape != (Wt.shape[0], Ws.shape[0]):
        raise ValueError(
            f"map of shape {M.shape} does not fit forms of size {Ws.shape[0]} -> {Wt.shape[0]}"
        )
    Me, We, Se = _exact(M), _exact(Wt), _exact(Ws)
    pulled = Me.T.dot(We).dot(Me)
    if np.array_equal(pulled, Se):
        return SymplectomorphismCheck(True, 1)
    if np.array_equal(pulled, -Se):
        return SymplectomorphismCheck(True, -1)
    return SymplectomorphismCheck(False, 0)
