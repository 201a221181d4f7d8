"""Continuous P1 spaces for the pair (u_h, sigma_h) on a space-time mesh."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .mesh import SpaceTimeMesh

__all__ = [
    "DofMap",
    "DiscretePair",
    "PointValues",
    "build_dof_map",
    "evaluate",
    "trace_at_time",
    "interpolate_pair",
    "pair_from_nodal",
    "prolong",
]


@dataclass(frozen=True)
class DofMap:
    """Unknown numbering: u-block (non-lateral vertices) first, then sigma vertex-major.

    ``u_dofs[v]`` is -1 for vertices on the lateral boundary.
    ``sigma_dofs[v, c]`` is the unknown of component c at vertex v.
    """

    u_dofs: np.ndarray
    sigma_dofs: np.ndarray
    n_u: int
    n_total: int

    @property
    def n_sigma(self) -> int:
        return self.n_total - self.n_u

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.nonzero(self.u_dofs >= 0)[0]


def build_dof_map(mesh: SpaceTimeMesh) -> DofMap:
    unclassified = mesh.facets_unclassified
    if len(unclassified):
        raise ValueError(f"{len(unclassified)} boundary facets could not be classified")
    nv, d = mesh.nvertices, mesh.space_dim
    free = ~mesh.lateral_flags
    u_dofs = np.full(nv, -1, dtype=np.int64)
    n_u = int(free.sum())
    u_dofs[free] = np.arange(n_u)
    sigma_dofs = n_u + np.arange(nv * d, dtype=np.int64).reshape(nv, d)
    return DofMap(u_dofs, sigma_dofs, n_u, n_u + nv * d)


@dataclass(frozen=True)
class DiscretePair:
    coeffs: np.ndarray
    dofmap: DofMap
    mesh: SpaceTimeMesh

    def __post_init__(self):
        if len(self.coeffs) != self.dofmap.n_total:
            raise ValueError("coefficient vector does not match the dof map")

    @classmethod
    def zeros(cls, mesh, dofmap=None):
        dofmap = dofmap or build_dof_map(mesh)
        return cls(np.zeros(dofmap.n_total), dofmap, mesh)

    @property
    def u_nodal(self) -> np.ndarray:
        """u_h at every mesh vertex (zero on the lateral boundary)."""
        out = np.zeros(self.mesh.nvertices)
        free = self.dofmap.u_dofs >= 0
        out[free] = self.coeffs[self.dofmap.u_dofs[free]]
        return out

    @property
    def sigma_nodal(self) -> np.ndarray:
        return self.coeffs[self.dofmap.sigma_dofs]

    # element-wise derived quantities, all vectorized over elements
    def local_u(self):
        return self.u_nodal[self.mesh.elements]

    def local_sigma(self):
        return self.sigma_nodal[self.mesh.elements]  # (E, n+1, d)

    def gradients(self):
        """Space-time gradient of u_h per element, shape (E, d+1)."""
        return np.einsum("ei,eik->ek", self.local_u(), self.mesh.grads)

    def divergence(self):
        g = self.mesh.grads[:, :, 1:]
        return np.einsum("eic,eic->e", self.local_sigma(), g)

    def residual(self):
        """dt u_h - div sigma_h, constant on each element."""
        return self.gradients()[:, 0] - self.divergence()


class PointValues(NamedTuple):
    u: float
    dt_u: float
    grad_x_u: np.ndarray
    sigma: np.ndarray
    div_sigma: float
    residual: float


def evaluate(p: DiscretePair, element: int, bary) -> PointValues:
    """Values of u_h, sigma_h and their derivatives at a barycentric point of an element."""
    bary = np.asarray(bary, dtype=float)
    verts = p.mesh.elements[element]
    g = p.mesh.grads[element]
    uloc = p.u_nodal[verts]
    sloc = p.sigma_nodal[verts]
    grad = uloc @ g
    div = float(np.einsum("ic,ic->", sloc, g[:, 1:]))
    return PointValues(
        u=float(bary @ uloc),
        dt_u=float(grad[0]),
        grad_x_u=grad[1:],
        sigma=bary @ sloc,
        div_sigma=div,
        residual=float(grad[0] - div),
    )


def trace_at_time(p: DiscretePair, which: str, facet: int, bary) -> float:
    """u_h restricted to an initial or terminal facet, at a facet barycentric point."""
    if which == "initial":
        facets = p.mesh.facets_initial
    elif which == "terminal":
        facets = p.mesh.facets_terminal
    else:
        raise ValueError(f"unknown time plane {which!r}")
    if not 0 <= facet < len(facets):
        raise IndexError("facet is not on the requested time plane")
    return float(np.asarray(bary, dtype=float) @ p.u_nodal[facets[facet]])


def pair_from_nodal(mesh: SpaceTimeMesh, u_nodal, sigma_nodal, dofmap=None) -> DiscretePair:
    """Assemble a coefficient vector from vertex values; lateral u values are dropped."""
    dofmap = dofmap or build_dof_map(mesh)
    x = np.zeros(dofmap.n_total)
    free = dofmap.u_dofs >= 0
    if u_nodal is not None:
        x[dofmap.u_dofs[free]] = np.asarray(u_nodal)[free]
    if sigma_nodal is not None:
        x[dofmap.sigma_dofs.ravel()] = np.asarray(sigma_nodal, dtype=float).reshape(-1)
    return DiscretePair(x, dofmap, mesh)


def interpolate_pair(mesh: SpaceTimeMesh, u, grad_u, dofmap=None) -> DiscretePair:
    """Nodal interpolant of (u, grad u); u is forced to zero on the lateral boundary."""
    un = None if u is None else u(mesh.vertices)
    sn = None if grad_u is None else grad_u(mesh.vertices)
    return pair_from_nodal(mesh, un, sn, dofmap)


def _prolong_nodal(values, vertex_parents):
    nv_new = len(vertex_parents)
    out = np.zeros((nv_new,) + values.shape[1:])
    n_old = len(values)
    out[:n_old] = values
    ready = np.zeros(nv_new, dtype=bool)
    ready[:n_old] = True
    a, b = vertex_parents[:, 0], vertex_parents[:, 1]
    while not ready.all():
        sel = ~ready & ready[np.maximum(a, 0)] & ready[np.maximum(b, 0)]
        if not sel.any():
            raise ValueError("vertex parents do not describe a nested refinement")
        out[sel] = 0.5 * (out[a[sel]] + out[b[sel]])
        ready |= sel
    return out


def prolong(p: DiscretePair, fine_mesh: SpaceTimeMesh, dofmap=None) -> DiscretePair:
    """Exact transfer of a discrete pair to a mesh obtained by bisection."""
    dofmap = dofmap or build_dof_map(fine_mesh)
    u = _prolong_nodal(p.u_nodal, fine_mesh.vertex_parents)
    s = _prolong_nodal(p.sigma_nodal, fine_mesh.vertex_parents)
    x = np.empty(dofmap.n_total)
    free = dofmap.u_dofs >= 0
    x[dofmap.u_dofs[free]] = u[free]
    x[dofmap.sigma_dofs] = s
    return DiscretePair(x, dofmap, fine_mesh)
