"""Local least-squares error indicators and errors against exact solutions."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .assembly import CHUNK, DATA_ORDER, data_resolution, element_data_integrals, initial_data_integrals
from .fe_space import DiscretePair
from .mesh import simplex_measure
from .quadrature import simplex_rule

__all__ = ["IndicatorField", "ErrorReport", "local_indicators", "error_norms", "ERROR_ORDER"]

ERROR_ORDER = 4


@dataclass(frozen=True)
class IndicatorField:
    """Squared indicators eta(K)^2 with their three contributions."""

    flux: np.ndarray  # |sigma_h - grad_x u_h|^2_K
    residual: np.ndarray  # |dt u_h - div sigma_h - f|^2_K
    initial: np.ndarray  # |u_h(0) - u0|^2 on the initial facets of K

    @property
    def values(self) -> np.ndarray:
        return self.flux + self.residual + self.initial

    @property
    def total(self) -> float:
        """eta^2, summed in element order."""
        return float(np.sum(self.values))

    @property
    def eta(self) -> float:
        return math.sqrt(max(self.total, 0.0))


def _flux_term(p: DiscretePair):
    mesh = p.mesh
    n = mesh.dim
    grad_x = p.gradients()[:, 1:]  # (E, d)
    w = p.local_sigma() - grad_x[:, None, :]  # affine difference at the vertices
    # int_K (sum_i w_i lambda_i)^2 = |K| / ((n+1)(n+2)) (sum_i w_i^2 + (sum_i w_i)^2)
    s = np.sum(w**2, axis=1) + np.sum(w, axis=1) ** 2
    return mesh.volumes * s.sum(axis=1) / ((n + 1) * (n + 2))


def local_indicators(mesh, solution: DiscretePair, problem, order: int = DATA_ORDER) -> IndicatorField:
    """eta(K)^2 for every element; data terms use the same rule as the load vector."""
    if solution.mesh is not mesh:
        raise ValueError("solution lives on a different mesh")
    flux = _flux_term(solution)

    r = solution.residual()
    intf, intf2 = element_data_integrals(mesh, problem.f, order, data_resolution(problem))
    residual = np.maximum(r**2 * mesh.volumes - 2 * r * intf + intf2, 0.0)

    initial = np.zeros(mesh.nelements)
    facets = mesh.facets_initial
    if len(facets):
        load0, sq0 = initial_data_integrals(mesh, problem.u0, order)
        uf = solution.u_nodal[facets]
        k = facets.shape[1] - 1
        meas = simplex_measure(mesh.vertices[facets])
        uu = meas * (np.sum(uf**2, axis=1) + np.sum(uf, axis=1) ** 2) / ((k + 1) * (k + 2))
        contrib = np.maximum(uu - 2 * np.sum(uf * load0, axis=1) + sq0, 0.0)
        np.add.at(initial, mesh.facets_initial_owner, contrib)
    return IndicatorField(flux, residual, initial)


@dataclass(frozen=True)
class ErrorReport:
    err_l2: Optional[float] = None  # |u - u_h| on J x Omega
    err_u0: Optional[float] = None  # |(u - u_h)(0)| on Omega
    err_uT: Optional[float] = None  # |(u - u_h)(T)| on Omega
    err_flux: Optional[float] = None  # |grad u - sigma_h| on J x Omega
    err_dt: Optional[float] = None  # |dt (u - u_h)| on J x Omega

    @property
    def available(self) -> bool:
        return self.err_l2 is not None

    @property
    def total(self) -> Optional[float]:
        vals = [getattr(self, f.name) for f in fields(self)]
        vals = [v for v in vals if v is not None]
        return math.sqrt(sum(v * v for v in vals)) if vals else None


def _facet_error(mesh, facets, p: DiscretePair, u, t, order):
    if len(facets) == 0:
        return 0.0
    rule = simplex_rule(mesh.space_dim, order)
    coords = mesh.vertices[facets]
    pts = rule.physical_points(coords)  # (F, nq, d+1)
    pts[..., 0] = t
    uh = np.einsum("qi,fi->fq", rule.points, p.u_nodal[facets])
    ex = u(pts.reshape(-1, mesh.dim)).reshape(uh.shape)
    return float(np.sum(simplex_measure(coords) * (((ex - uh) ** 2) @ rule.weights)))


def error_norms(mesh, solution: DiscretePair, u=None, grad_u=None, dt_u=None,
                order: int = ERROR_ORDER) -> ErrorReport:
    """L2-type errors of (u_h, sigma_h) against exact callbacks.

    Components whose callback is missing are reported as None.
    """
    if u is None:
        return ErrorReport()
    rule = simplex_rule(mesh.dim, order)
    E = mesh.nelements
    acc = {"l2": 0.0, "flux": 0.0, "dt": 0.0}
    unod, snod = solution.u_nodal, solution.sigma_nodal
    for s in range(0, E, CHUNK):
        sl = slice(s, min(s + CHUNK, E))
        el = mesh.elements[sl]
        vol = mesh.volumes[sl]
        pts = rule.physical_points(mesh.vertices[el])
        flat = pts.reshape(-1, mesh.dim)
        uh = np.einsum("qi,ei->eq", rule.points, unod[el])
        ex = u(flat).reshape(uh.shape)
        acc["l2"] += float(vol @ (((ex - uh) ** 2) @ rule.weights))
        if grad_u is not None:
            sh = np.einsum("qi,eic->eqc", rule.points, snod[el])
            gx = np.asarray(grad_u(flat)).reshape(sh.shape)
            acc["flux"] += float(vol @ (np.sum((gx - sh) ** 2, axis=2) @ rule.weights))
        if dt_u is not None:
            dth = np.einsum("ei,ei->e", unod[el], mesh.grads[sl][:, :, 0])
            dte = dt_u(flat).reshape(uh.shape)
            acc["dt"] += float(vol @ (((dte - dth[:, None]) ** 2) @ rule.weights))
    e0 = _facet_error(mesh, mesh.facets_initial, solution, u, 0.0, order)
    eT = _facet_error(mesh, mesh.facets_terminal, solution, u, mesh.T, order)
    return ErrorReport(
        err_l2=math.sqrt(acc["l2"]),
        err_u0=math.sqrt(e0),
        err_uT=math.sqrt(eT),
        err_flux=math.sqrt(acc["flux"]) if grad_u is not None else None,
        err_dt=math.sqrt(acc["dt"]) if dt_u is not None else None,
    )
