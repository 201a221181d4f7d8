"""Tensor-product interpolation operators and their simplicial counterparts.

The operators are

* ``Pi_h`` / ``Pi_0h``: L2 projection onto spatial P1 (with or without the
  homogeneous boundary condition),
* ``I_h``: piecewise linear interpolation in time,
* ``J_h = I_h o Pi_h`` (and ``J_0h``) on tensor meshes, and
* the nodal copy of ``J_h`` onto the simplicial split of the same mesh.

``interp_rate_study`` measures the interpolation errors on a sequence of
uniform meshes and reports rates against the mesh size h.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import assemble
from .estimator import error_norms
from .fe_space import DiscretePair, build_dof_map, pair_from_nodal
from .linear_solver import pcg
from .mesh import (
    SpaceTimeMesh,
    SpatialMesh,
    TimePartition,
    build_tensor_product_mesh,
    interval_mesh,
    simplex_geometry,
    square_mesh,
)
from .quadrature import simplex_rule

__all__ = [
    "TensorFunction",
    "l2_projection",
    "time_interpolate",
    "tensor_interpolant",
    "simplicial_transfer",
    "tensor_errors",
    "simplicial_errors",
    "interp_rate_study",
    "RATE_QUANTITIES",
    "interpolant_pair",
    "quasi_optimality_study",
]

QUAD_ORDER = 4


# ----------------------------------------------------------------------------
# spatial projection
# ----------------------------------------------------------------------------


def _spatial_geometry(sm: SpatialMesh):
    return simplex_geometry(sm.vertices[sm.elements])


def _mass_matrix(sm: SpatialMesh):
    n1 = sm.dim + 1
    local = (np.ones((n1, n1)) + np.eye(n1)) / ((n1) * (n1 + 1))
    data = sm.volumes[:, None, None] * local
    rows = np.repeat(sm.elements, n1, axis=1).ravel()
    cols = np.tile(sm.elements, (1, n1)).ravel()
    nv = len(sm.vertices)
    return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(nv, nv))


def l2_projection(sm: SpatialMesh, g: Callable, constrained: bool = False,
                  order: int = QUAD_ORDER) -> np.ndarray:
    """Coefficients of the L2(Omega) projection of ``g`` onto spatial P1.

    ``g`` maps points (m, d) to values (m,) or (m, k); vector-valued input is
    projected componentwise.  With ``constrained`` the projection is onto the
    P1 functions vanishing on the boundary.
    """
    rule = simplex_rule(sm.dim, order)
    coords = sm.vertices[sm.elements]
    pts = rule.physical_points(coords)
    vals = np.asarray(g(pts.reshape(-1, sm.dim)), dtype=float)
    vector = vals.ndim == 2
    vals = vals.reshape(pts.shape[:2] + ((vals.shape[1],) if vector else ()))
    # rhs_i = int g lambda_i
    loc = np.einsum("q,qi,eq...->ei...", rule.weights, rule.points, vals)
    loc *= sm.volumes.reshape((-1, 1) + (1,) * (loc.ndim - 2))
    nv = len(sm.vertices)
    rhs = np.zeros((nv,) + loc.shape[2:])
    np.add.at(rhs, sm.elements, loc)
    M = _mass_matrix(sm)
    free = ~sm.boundary_vertices if constrained else np.ones(nv, dtype=bool)
    out = np.zeros_like(rhs)
    if free.any():
        Mf = M[free][:, free].tocsc()
        sol = spla.splu(Mf).solve(rhs[free])
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("singular mass matrix")
        out[free] = sol
    return out


# ----------------------------------------------------------------------------
# semidiscrete functions
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorFunction:
    """Function affine in time between the nodes of ``tp``.

    Node values are either spatial P1 coefficient arrays (``values`` with shape
    (M+1, nv) or (M+1, nv, k)) on ``sm``, or arbitrary callables
    (``node_functions``) for the purely temporal interpolant.
    """

    tp: TimePartition
    sm: Optional[SpatialMesh] = None
    values: Optional[np.ndarray] = None
    node_functions: Optional[tuple] = None

    def __post_init__(self):
        if (self.values is None) == (self.node_functions is None):
            raise ValueError("give exactly one of values or node_functions")
        nt = len(self.tp.nodes)
        if self.values is not None:
            if self.sm is None:
                raise ValueError("discrete node values need a spatial mesh")
            if self.values.shape[0] != nt or self.values.shape[1] != len(self.sm.vertices):
                raise ValueError("values must have one spatial vector per time node")
        elif len(self.node_functions) != nt:
            raise ValueError("need one node function per time node")

    @property
    def is_discrete(self) -> bool:
        return self.values is not None

    def _slab(self, t):
        nodes = self.tp.nodes
        k = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, len(nodes) - 2)
        theta = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
        return k, theta

    def _spatial_locate(self, x):
        sm = self.sm
        _, grads = _spatial_geometry(sm)
        x0 = sm.vertices[sm.elements[:, 0]]
        elem = np.full(len(x), -1, dtype=np.int64)
        bary = np.zeros((len(x), sm.dim + 1))
        for i, p in enumerate(x):
            lam_rest = np.einsum("ejk,ek->ej", grads[:, 1:, :], p - x0)
            lam = np.column_stack([1.0 - lam_rest.sum(1), lam_rest])
            ok = np.nonzero(np.all(lam >= -1e-10, axis=1))[0]
            if len(ok) == 0:
                raise ValueError("point outside the spatial mesh")
            elem[i] = ok[0]
            bary[i] = lam[ok[0]]
        return elem, bary

    def node_values(self, k: int, x: np.ndarray) -> np.ndarray:
        if not self.is_discrete:
            return np.asarray(self.node_functions[k](x), dtype=float)
        elem, bary = self._spatial_locate(x)
        vals = self.values[k][self.sm.elements[elem]]
        return np.einsum("mi,mi...->m...", bary, vals)

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        t, x = points[:, 0], points[:, 1:]
        k, theta = self._slab(t)
        out = None
        for slab in np.unique(k):
            sel = k == slab
            a = self.node_values(slab, x[sel])
            b = self.node_values(slab + 1, x[sel])
            th = theta[sel].reshape((-1,) + (1,) * (a.ndim - 1))
            v = (1 - th) * a + th * b
            if out is None:
                out = np.zeros((len(points),) + v.shape[1:])
            out[sel] = v
        return out


def time_interpolate(u: Callable, tp: TimePartition) -> TensorFunction:
    """Piecewise linear interpolation in time: node values u(t_k, .)."""

    def node(tk):
        def g(x):
            x = np.atleast_2d(x)
            return u(np.column_stack([np.full(len(x), tk), x]))

        return g

    return TensorFunction(tp, node_functions=tuple(node(t) for t in tp.nodes))


def tensor_interpolant(u: Callable, tp: TimePartition, sm: SpatialMesh,
                       constrained: bool = False) -> TensorFunction:
    """Time interpolation of the spatial L2 projections of u(t_k, .)."""
    rows = []
    for tk in tp.nodes:
        def g(x, tk=tk):
            return u(np.column_stack([np.full(len(x), tk), x]))

        rows.append(l2_projection(sm, g, constrained))
    return TensorFunction(tp, sm, values=np.stack(rows))


def simplicial_transfer(tf: TensorFunction, stm: SpaceTimeMesh) -> np.ndarray:
    """Nodal values of ``tf`` on the tensor-split mesh sharing its vertices."""
    if not tf.is_discrete:
        raise ValueError("only discrete tensor functions have a simplicial counterpart")
    ns = len(tf.sm.vertices)
    nt = len(tf.tp.nodes)
    if stm.nvertices != ns * nt:
        raise ValueError("vertex sets of the tensor and simplicial meshes differ")
    expect = np.column_stack([np.repeat(tf.tp.nodes, ns), np.tile(tf.sm.vertices, (nt, 1))])
    if not np.allclose(stm.vertices, expect, rtol=0.0, atol=1e-12 * max(1.0, stm.diameter)):
        raise ValueError("vertex sets of the tensor and simplicial meshes differ")
    return tf.values.reshape((ns * nt,) + tf.values.shape[2:]).copy()


# ----------------------------------------------------------------------------
# error norms
# ----------------------------------------------------------------------------


def _gauss01(order):
    x, w = np.polynomial.legendre.leggauss(order // 2 + 1)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_errors(tf: TensorFunction, u: Callable, grad_u: Callable | None = None,
                  dt_u: Callable | None = None, sm: SpatialMesh | None = None,
                  order: int = QUAD_ORDER) -> dict:
    """Errors of a tensor function by slab x element tensor quadrature.

    Returns ``l2`` = |u - tf|_{L2(L2)}, ``dt`` = |(u - tf)'|_{L2(L2)} and, for
    discrete ``tf``, ``grad`` = |grad_x (u - tf)|_{L2(L2)}.
    """
    sm = sm or tf.sm
    if sm is None:
        raise ValueError("a spatial mesh is needed to integrate")
    rule = simplex_rule(sm.dim, order)
    coords = sm.vertices[sm.elements]
    xq = rule.physical_points(coords)  # (E, nq, d)
    E, nq, d = xq.shape
    xflat = xq.reshape(-1, d)
    vol = sm.volumes
    s_tau, w_tau = _gauss01(order)
    nodes = tf.tp.nodes
    if tf.is_discrete:
        _, sgrads = _spatial_geometry(sm)

    def node_data(k):
        if tf.is_discrete:
            c = tf.values[k][sm.elements]  # (E, d+1)
            return np.einsum("qi,ei->eq", rule.points, c), np.einsum("ei,eic->ec", c, sgrads)
        return np.asarray(tf.node_functions[k](xflat)).reshape(E, nq), None

    acc = {"l2": 0.0, "dt": 0.0, "grad": 0.0}
    a_val, a_grad = node_data(0)
    for k in range(len(nodes) - 1):
        b_val, b_grad = node_data(k + 1)
        ht = nodes[k + 1] - nodes[k]
        for s, w in zip(s_tau, w_tau):
            t = nodes[k] + s * ht
            pts = np.column_stack([np.full(len(xflat), t), xflat])
            ex = u(pts).reshape(E, nq)
            approx = (1 - s) * a_val + s * b_val
            acc["l2"] += ht * w * float(vol @ (((ex - approx) ** 2) @ rule.weights))
            if dt_u is not None:
                dex = dt_u(pts).reshape(E, nq)
                dap = (b_val - a_val) / ht
                acc["dt"] += ht * w * float(vol @ (((dex - dap) ** 2) @ rule.weights))
            if grad_u is not None and tf.is_discrete:
                gex = np.asarray(grad_u(pts)).reshape(E, nq, d)
                gap = ((1 - s) * a_grad + s * b_grad)[:, None, :]
                acc["grad"] += ht * w * float(vol @ (np.sum((gex - gap) ** 2, axis=2) @ rule.weights))
        a_val, a_grad = b_val, b_grad
    out = {"l2": math.sqrt(acc["l2"])}
    if dt_u is not None:
        out["dt"] = math.sqrt(acc["dt"])
    if grad_u is not None and tf.is_discrete:
        out["grad"] = math.sqrt(acc["grad"])
    return out


def simplicial_errors(mesh: SpaceTimeMesh, u_nodal: np.ndarray, u: Callable,
                      grad_u: Callable, dt_u: Callable, sigma_nodal: np.ndarray | None = None,
                      order: int = QUAD_ORDER) -> dict:
    """Errors of nodal P1 fields on a simplicial space-time mesh.

    ``grad`` = |grad_x (u - u_h)|, ``dt`` = |d_t (u - u_h)|, ``l2`` = |u - u_h|,
    and with ``sigma_nodal`` also ``flux`` = |grad u - sigma_h|, all over J x Omega.
    """
    rule = simplex_rule(mesh.dim, order)
    pts = rule.physical_points(mesh.vertices[mesh.elements])
    flat = pts.reshape(-1, mesh.dim)
    E, nq, n = pts.shape
    vol = mesh.volumes
    loc = u_nodal[mesh.elements]
    g = np.einsum("ei,eik->ek", loc, mesh.grads)  # (E, d+1) constant gradients
    uh = np.einsum("qi,ei->eq", rule.points, loc)
    gex = np.asarray(grad_u(flat)).reshape(E, nq, n - 1)
    out = {
        "l2": float(vol @ (((u(flat).reshape(E, nq) - uh) ** 2) @ rule.weights)),
        "grad": float(vol @ (np.sum((gex - g[:, None, 1:]) ** 2, axis=2) @ rule.weights)),
        "dt": float(vol @ (((dt_u(flat).reshape(E, nq) - g[:, None, 0]) ** 2) @ rule.weights)),
    }
    if sigma_nodal is not None:
        sh = np.einsum("qi,eic->eqc", rule.points, np.asarray(sigma_nodal)[mesh.elements])
        out["flux"] = float(vol @ (np.sum((gex - sh) ** 2, axis=2) @ rule.weights))
    return {k: math.sqrt(v) for k, v in out.items()}


# ----------------------------------------------------------------------------
# rate study
# ----------------------------------------------------------------------------

RATE_QUANTITIES = (
    "tensor_l2h1",  # |u - J0h_tensor u|_{L2(H1)}
    "tensor_dt",  # |(u - J0h_tensor u)'|_{L2(L2)}
    "simp_l2h1",  # |u - J0h u|_{L2(H1)}
    "simp_dt",  # |(u - J0h u)'|_{L2(L2)}
    "simp_flux",  # |grad u - Jh grad u|_{L2(L2)}
    "time_l2",  # |u - I_h u|_{L2(L2)}
)


def _uniform_pair(d: int, n: int, T: float = 1.0):
    tp = TimePartition.uniform(T, n)
    sm = interval_mesh(n) if d == 1 else square_mesh(n)
    return tp, sm


def interpolant_pair(u: Callable, grad_u: Callable, tp: TimePartition, sm: SpatialMesh,
                     stm: SpaceTimeMesh | None = None) -> DiscretePair:
    """(J_0h u, J_h grad u) as a discrete pair on the tensor-split mesh."""
    stm = stm or build_tensor_product_mesh(tp, sm)
    ju = simplicial_transfer(tensor_interpolant(u, tp, sm, constrained=True), stm)
    jg = simplicial_transfer(tensor_interpolant(grad_u, tp, sm, constrained=False), stm)
    return pair_from_nodal(stm, ju, jg)


def interp_rate_study(u: Callable, grad_u: Callable, dt_u: Callable, d: int = 1,
                      levels: Sequence[int] | int = 4, base: int = 2) -> list[dict]:
    """Interpolation errors on uniform tensor meshes with h = 1/(base 2^l).

    Each row holds ``level``, ``h``, ``ndofs`` (vertices of the space-time
    mesh), every quantity of :data:`RATE_QUANTITIES` and, from the second row
    on, ``rate_<quantity>`` = log(e_prev/e)/log(h_prev/h).
    """
    if isinstance(levels, int):
        levels = range(levels)
    rows = []
    for lev in levels:
        n = base * 2 ** lev
        tp, sm = _uniform_pair(d, n)
        stm = build_tensor_product_mesh(tp, sm)
        j0 = tensor_interpolant(u, tp, sm, constrained=True)
        jg = tensor_interpolant(grad_u, tp, sm, constrained=False)
        te = tensor_errors(j0, u, grad_u, dt_u)
        ie = tensor_errors(time_interpolate(u, tp), u, sm=sm)
        se = simplicial_errors(stm, simplicial_transfer(j0, stm), u, grad_u, dt_u,
                               sigma_nodal=simplicial_transfer(jg, stm))
        rows.append({
            "level": lev,
            "h": 1.0 / n,
            "ndofs": stm.nvertices,
            "tensor_l2h1": te["grad"],
            "tensor_dt": te["dt"],
            "simp_l2h1": se["grad"],
            "simp_dt": se["dt"],
            "simp_flux": se["flux"],
            "time_l2": ie["l2"],
        })
    for prev, row in zip(rows, rows[1:]):
        lh = math.log(prev["h"] / row["h"])
        for q in RATE_QUANTITIES:
            a, b = prev[q], row[q]
            row[f"rate_{q}"] = math.log(a / b) / lh if a > 0 and b > 0 else float("nan")
    return rows


def quasi_optimality_study(problem, levels: Sequence[int] | int = 4, base: int = 2,
                           solver=None) -> list[dict]:
    """Least-squares error against the interpolant pair error on tensor meshes.

    Returns rows with ``ls_error``, ``interp_error`` and their ``ratio``; errors
    are root-sum-squares of the :class:`ErrorReport` components.
    """
    if isinstance(levels, int):
        levels = range(levels)
    rows = []
    for lev in levels:
        n = base * 2 ** lev
        tp, sm = _uniform_pair(problem.d, n, problem.T)
        stm = build_tensor_product_mesh(tp, sm)
        dm = build_dof_map(stm)
        system = assemble(stm, dm, problem)
        x, stats = pcg(system, solver)
        ls = error_norms(stm, DiscretePair(x, dm, stm), problem.u, problem.grad_u, problem.dt_u)
        ip = error_norms(stm, interpolant_pair(problem.u, problem.grad_u, tp, sm, stm),
                         problem.u, problem.grad_u, problem.dt_u)
        rows.append({"level": lev, "h": 1.0 / n, "ndofs": dm.n_total, "converged": stats.converged,
                     "ls_error": ls.total, "interp_error": ip.total,
                     "ratio": ls.total / ip.total})
    return rows

