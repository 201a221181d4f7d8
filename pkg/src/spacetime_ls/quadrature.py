"""Symmetric quadrature rules on simplices of dimension 1, 2 and 3.

Rules are stored in barycentric coordinates with weights normalized to sum
to one, so that ``integral over K of f ~= |K| * sum_q w_q f(x_q)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "QuadratureRule",
    "simplex_rule",
    "composite_rule",
    "integrate_on_element",
    "integrate_on_facet",
    "barycentric_monomial_integral",
]


@dataclass(frozen=True)
class QuadratureRule:
    dim: int
    order: int
    points: np.ndarray  # (nq, dim + 1) barycentric
    weights: np.ndarray  # (nq,), sum to 1

    @property
    def npoints(self) -> int:
        return len(self.weights)

    def physical_points(self, coords: np.ndarray) -> np.ndarray:
        """Map the rule to simplices given by vertex coordinates.

        ``coords`` has shape (..., dim + 1, ambient); the result has shape
        (..., nq, ambient).
        """
        return np.einsum("qi,...ik->...qk", self.points, coords)


def _orbit(point, weight):
    pts = sorted(set(itertools.permutations(point)))
    return [(p, weight) for p in pts]


def _build(dim, order, classes):
    rows = []
    for point, weight in classes:
        rows.extend(_orbit(point, weight))
    pts = np.array([r[0] for r in rows], dtype=float)
    wts = np.array([r[1] for r in rows], dtype=float)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(dim, order, pts, wts)


def _gauss_line(npts, order):
    x, w = np.polynomial.legendre.leggauss(npts)
    s = 0.5 * (x + 1.0)
    pts = np.column_stack([1.0 - s, s])
    wts = 0.5 * w
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(1, order, pts, wts)


_S15 = math.sqrt(15.0)
_S5 = math.sqrt(5.0)

_TRI_CENTROID = [((1 / 3, 1 / 3, 1 / 3), 1.0)]
_TRI_3 = [((2 / 3, 1 / 6, 1 / 6), 1 / 3)]
_TRI_6 = [
    ((0.10810301816807023, 0.44594849091596489, 0.44594849091596489), 0.22338158967801147),
    ((0.81684757298045851, 0.09157621350977073, 0.09157621350977073), 0.10995174365532187),
]
_TRI_7 = [
    ((1 / 3, 1 / 3, 1 / 3), 0.225),
    (((9 - 2 * _S15) / 21, (6 + _S15) / 21, (6 + _S15) / 21), (155 + _S15) / 1200),
    (((9 + 2 * _S15) / 21, (6 - _S15) / 21, (6 - _S15) / 21), (155 - _S15) / 1200),
]

_TET_CENTROID = [((0.25, 0.25, 0.25, 0.25), 1.0)]
_TET_4 = [(((5 + 3 * _S5) / 20, (5 - _S5) / 20, (5 - _S5) / 20, (5 - _S5) / 20), 0.25)]
_A, _B, _C = 0.0927352503108912, 0.3108859192633006, 0.0455037041256496
_TET_14 = [
    ((_A, _A, _A, 1 - 3 * _A), 0.07349304311636196),
    ((_B, _B, _B, 1 - 3 * _B), 0.11268792571801585),
    ((_C, _C, 0.5 - _C, 0.5 - _C), 0.042546020777081466),
]


@lru_cache(maxsize=None)
def simplex_rule(dim: int, order: int) -> QuadratureRule:
    """Return a positive-weight symmetric rule exact up to total degree ``order``.

    Supported: ``dim`` in 1..3, ``order`` in 1..5.  Requests are served by the
    cheapest shipped rule of at least the requested order.
    """
    if dim not in (1, 2, 3) or not 1 <= order <= 5:
        raise ValueError(f"unsupported quadrature request dim={dim}, order={order}")
    if dim == 1:
        return _gauss_line((order + 2) // 2, order)
    if dim == 2:
        if order == 1:
            return _build(2, 1, _TRI_CENTROID)
        if order == 2:
            return _build(2, 2, _TRI_3)
        if order <= 4:
            return _build(2, order, _TRI_6)
        return _build(2, 5, _TRI_7)
    if order == 1:
        return _build(3, 1, _TET_CENTROID)
    if order == 2:
        return _build(3, 2, _TET_4)
    return _build(3, order, _TET_14)


def _freudenthal(dim, k):
    """Barycentric vertices (k^dim, dim+1, dim+1) of the uniform k-fold subdivision."""
    # ordered coordinates k >= y_1 >= ... >= y_dim >= 0 describe the reference simplex
    subs = []
    for base in itertools.product(range(k), repeat=dim):
        base = np.array(base)
        for perm in itertools.permutations(range(dim)):
            verts = [base.copy()]
            for axis in perm:
                nxt = verts[-1].copy()
                nxt[axis] += 1
                verts.append(nxt)
            verts = np.array(verts)
            if np.all(np.diff(verts, axis=1) <= 0) and np.all(verts <= k):
                subs.append(verts)
    y = np.array(subs, dtype=float) / k  # (m, dim+1, dim)
    lam = np.empty(y.shape[:2] + (dim + 1,))
    lam[..., 0] = 1.0 - y[..., 0]
    lam[..., 1:dim] = y[..., :-1] - y[..., 1:]
    lam[..., dim] = y[..., -1]
    return lam


@lru_cache(maxsize=64)
def composite_rule(dim: int, order: int, k: int) -> QuadratureRule:
    """``simplex_rule(dim, order)`` applied on each of the k^dim congruent subsimplices.

    Useful for data with small or thin support, which a single rule per element
    may miss entirely.
    """
    base = simplex_rule(dim, order)
    if k == 1:
        return base
    if k < 1:
        raise ValueError("subdivision factor must be positive")
    subs = _freudenthal(dim, k)
    pts = np.einsum("qi,sij->sqj", base.points, subs).reshape(-1, dim + 1)
    w = np.tile(base.weights, len(subs)) / len(subs)
    return QuadratureRule(dim, order, pts, w)


def barycentric_monomial_integral(exponents, measure=1.0) -> float:
    """Exact integral of prod(lambda_i ** a_i) over a simplex of given measure."""
    dim = len(exponents) - 1
    num = math.prod(math.factorial(a) for a in exponents) * math.factorial(dim)
    return num / math.factorial(sum(exponents) + dim) * measure


def integrate_on_element(mesh, element, rule: QuadratureRule, integrand) -> float:
    """|K| * sum_q w_q f(x_q) for one space-time element.

    ``integrand`` maps an (nq, d+1) array of space-time points to nq values.
    """
    coords = mesh.vertices[mesh.elements[element]]
    vol = mesh.volumes[element]
    vals = np.asarray(integrand(rule.physical_points(coords)), dtype=float)
    return float(vol * (rule.weights @ vals))


def integrate_on_facet(mesh, facet, rule: QuadratureRule, integrand) -> float:
    """Facet-measure weighted quadrature sum.

    ``facet`` is a tuple of d+1 vertex indices of the space-time mesh.
    """
    from .mesh import simplex_measure

    coords = mesh.vertices[np.asarray(facet)]
    meas = simplex_measure(coords[None])[0]
    vals = np.asarray(integrand(rule.physical_points(coords)), dtype=float)
    return float(meas * (rule.weights @ vals))
