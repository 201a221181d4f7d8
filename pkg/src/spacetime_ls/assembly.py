"""Assembly of the symmetric positive definite least-squares system.

For a pair (v, psi) the quadratic form is

    |grad_x v - psi|^2_{J x Omega} + |dt v - div psi|^2_{J x Omega} + |v(0)|^2_Omega

and the right-hand side is (f, dt v - div psi) + (u0, v(0)).  Volume terms are
integrated exactly from barycentric gradients; data terms use a quadrature rule.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fe_space import DofMap, build_dof_map
from .mesh import SpaceTimeMesh, simplex_measure
from .quadrature import composite_rule, simplex_rule

__all__ = [
    "SparseSystem",
    "element_matrix",
    "initial_facet_matrix",
    "element_load",
    "initial_facet_load",
    "assemble",
    "DATA_ORDER",
    "element_data_integrals",
    "initial_data_integrals",
    "dump_matrix",
]

DATA_ORDER = 4
CHUNK = 1 << 16


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap
    data_norm2: float  # |f|^2 + |u0|^2 with the same quadrature as the load
    symmetric: bool = True

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("STLS_THREADS", "1") or 1)
    return max(1, threads)


def _mass_factor(n):
    # integral of lambda_i lambda_j over an n-simplex = |K| (1 + delta_ij) / ((n+1)(n+2))
    return 1.0 / ((n + 1) * (n + 2))


# ----------------------------------------------------------------------------
# local contributions
# ----------------------------------------------------------------------------


def _local_blocks(vol, grads):
    """Field-pair blocks of the local matrices for a batch of elements.

    Returns a dict keyed by field pairs (a, b), a, b in 0..d (0 = u, c = sigma_c),
    each value an array (E, n+1, n+1).
    """
    E, n1, n = grads.shape
    d = n - 1
    g_t = grads[:, :, 0]
    g_x = grads[:, :, 1:]
    V = vol[:, None, None]
    mf = _mass_factor(n)
    mass = V * mf * (np.ones((n1, n1)) + np.eye(n1))
    blocks = {}
    blocks[0, 0] = V * (np.einsum("eic,ejc->eij", g_x, g_x) + g_t[:, :, None] * g_t[:, None, :])
    for c in range(d):
        gc = g_x[:, :, c]
        # -(d_c lambda_i, lambda_j) - |K| g_t[i] g_c[j]
        blocks[0, c + 1] = -V * (gc[:, :, None] / n1 + g_t[:, :, None] * gc[:, None, :])
        blocks[c + 1, 0] = np.swapaxes(blocks[0, c + 1], 1, 2)
        for e in range(d):
            blk = V * (gc[:, :, None] * g_x[:, None, :, e])
            if c == e:
                blk = blk + mass
            blocks[c + 1, e + 1] = blk
    return blocks


def _local_dofs(mesh: SpaceTimeMesh, dofmap: DofMap, element):
    verts = mesh.elements[element]
    dofs = []
    for v in verts:
        dofs.append(dofmap.u_dofs[v])
        dofs.extend(dofmap.sigma_dofs[v])
    return np.array(dofs)


def element_matrix(mesh: SpaceTimeMesh, element: int, dofmap: DofMap | None = None):
    """Dense local matrix of one element.

    Local unknowns are ordered vertex by vertex as (u, sigma_1, ..., sigma_d).
    Returns ``(matrix, dofs)`` where eliminated u unknowns have dof -1; their
    rows and columns are still present in ``matrix``.
    """
    dofmap = dofmap or build_dof_map(mesh)
    n1 = mesh.dim + 1
    f = mesh.space_dim + 1
    blocks = _local_blocks(mesh.volumes[[element]], mesh.grads[[element]])
    A = np.zeros((n1 * f, n1 * f))
    for (a, b), blk in blocks.items():
        A[a::f, b::f] = blk[0]
    return A, _local_dofs(mesh, dofmap, element)


def _facet_mass(coords):
    k = coords.shape[-2] - 1
    meas = simplex_measure(coords)
    mf = 1.0 / ((k + 1) * (k + 2))
    return meas[:, None, None] * mf * (np.ones((k + 1, k + 1)) + np.eye(k + 1))


def initial_facet_matrix(mesh: SpaceTimeMesh, facet: int, dofmap: DofMap | None = None):
    """Mass matrix of the P1 traces on one initial facet.

    Returns ``(matrix, u_dofs)``; only entries between non-eliminated dofs matter.
    """
    dofmap = dofmap or build_dof_map(mesh)
    verts = mesh.facets_initial[facet]
    M = _facet_mass(mesh.vertices[verts][None])[0]
    return M, dofmap.u_dofs[verts]


def element_load(mesh: SpaceTimeMesh, element: int, f, dofmap: DofMap | None = None,
                 order: int = DATA_ORDER):
    """Local load vector in the ordering of :func:`element_matrix`."""
    dofmap = dofmap or build_dof_map(mesh)
    rule = simplex_rule(mesh.dim, order)
    coords = mesh.vertices[mesh.elements[element]]
    intf = mesh.volumes[element] * float(rule.weights @ f(rule.physical_points(coords)))
    g = mesh.grads[element]
    n1, fdim = mesh.dim + 1, mesh.space_dim + 1
    b = np.zeros(n1 * fdim)
    b[0::fdim] = g[:, 0] * intf
    for c in range(mesh.space_dim):
        b[c + 1::fdim] = -g[:, c + 1] * intf
    return b, _local_dofs(mesh, dofmap, element)


def initial_facet_load(mesh: SpaceTimeMesh, facet: int, u0, dofmap: DofMap | None = None,
                       order: int = DATA_ORDER):
    dofmap = dofmap or build_dof_map(mesh)
    verts = mesh.facets_initial[facet]
    rule = simplex_rule(mesh.space_dim, order)
    xs = rule.physical_points(mesh.vertices[verts][:, 1:])
    meas = simplex_measure(mesh.vertices[verts][None])[0]
    vals = u0(xs)
    return meas * (rule.points.T @ (rule.weights * vals)), dofmap.u_dofs[verts]


# ----------------------------------------------------------------------------
# global assembly
# ----------------------------------------------------------------------------


def _vertex_pattern(elements, nv):
    """CSR pattern of the vertex adjacency and the position of each local pair."""
    n1 = elements.shape[1]
    rows = np.repeat(elements, n1, axis=1).ravel()
    cols = np.tile(elements, (1, n1)).ravel()
    keys = rows * nv + cols
    uniq, pos = np.unique(keys, return_inverse=True)
    r = uniq // nv
    indptr = np.zeros(nv + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.bincount(r, minlength=nv))
    return indptr, (uniq % nv), uniq, pos.reshape(len(elements), n1 * n1)


def _data_integrals(mesh, f, rule, idx):
    coords = mesh.vertices[mesh.elements[idx]]
    pts = rule.physical_points(coords)
    vals = f(pts.reshape(-1, mesh.dim)).reshape(pts.shape[:2])
    vol = mesh.volumes[idx]
    return vol * (vals @ rule.weights), vol * ((vals**2) @ rule.weights)


def subdivision_levels(mesh: SpaceTimeMesh, resolution: float | None) -> np.ndarray:
    """Per-element subdivision factor k so that subsimplices have diameter <= resolution."""
    if resolution is None:
        return np.ones(mesh.nelements, dtype=np.int64)
    c = mesh.vertices[mesh.elements]
    n1 = c.shape[1]
    diam = np.zeros(mesh.nelements)
    for i in range(n1):
        for j in range(i + 1, n1):
            diam = np.maximum(diam, np.linalg.norm(c[:, i] - c[:, j], axis=1))
    return np.maximum(1, np.ceil(diam / resolution - 1e-9)).astype(np.int64)


def element_data_integrals(mesh: SpaceTimeMesh, f, order: int = DATA_ORDER,
                           resolution: float | None = None):
    """Per-element quadrature values of int_K f and int_K f^2.

    With ``resolution`` set, large elements use a composite rule so that data
    with thin support is resolved on coarse meshes.
    """
    E = mesh.nelements
    intf = np.empty(E)
    intf2 = np.empty(E)
    levels = subdivision_levels(mesh, resolution)
    for k in np.unique(levels):
        rule = composite_rule(mesh.dim, order, int(k))
        idx = np.nonzero(levels == k)[0]
        step = max(1, CHUNK * simplex_rule(mesh.dim, order).npoints // rule.npoints)
        for s in range(0, len(idx), step):
            sel = idx[s:s + step]
            intf[sel], intf2[sel] = _data_integrals(mesh, f, rule, sel)
    return intf, intf2


def initial_data_integrals(mesh: SpaceTimeMesh, u0, order: int = DATA_ORDER):
    """Per initial facet: int_F u0 lambda_i (F, d+1) and int_F u0^2 (F,)."""
    facets = mesh.facets_initial
    rule = simplex_rule(mesh.space_dim, order)
    coords = mesh.vertices[facets]
    meas = simplex_measure(coords)
    pts = rule.physical_points(coords[:, :, 1:])
    vals = u0(pts.reshape(-1, mesh.space_dim)).reshape(pts.shape[:2])
    load = meas[:, None] * ((vals * rule.weights) @ rule.points)
    sq = meas * ((vals**2) @ rule.weights)
    return load, sq


def data_resolution(problem):
    return getattr(problem, "data_resolution", None)


def assemble(mesh: SpaceTimeMesh, dofmap: DofMap | None, problem, threads: int | None = None,
             order: int = DATA_ORDER) -> SparseSystem:
    """Global matrix and right-hand side of the discrete least-squares problem."""
    dofmap = dofmap or build_dof_map(mesh)
    nv, n, d = mesh.nvertices, mesh.dim, mesh.space_dim
    n1 = n + 1
    E = mesh.nelements
    indptr, indices, keys, pos = _vertex_pattern(mesh.elements, nv)
    nnz = len(indices)
    pairs = [(a, b) for a in range(d + 1) for b in range(d + 1)]

    def work(start):
        stop = min(start + CHUNK, E)
        blocks = _local_blocks(mesh.volumes[start:stop], mesh.grads[start:stop])
        p = pos[start:stop].ravel()
        return {ab: np.bincount(p, weights=blocks[ab].ravel(), minlength=nnz) for ab in pairs}

    starts = range(0, E, CHUNK)
    nthreads = _threads(threads)
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            partials = list(pool.map(work, starts))
    else:
        partials = [work(s) for s in starts]
    data = {ab: np.zeros(nnz) for ab in pairs}
    for part in partials:  # fixed merge order
        for ab in pairs:
            data[ab] += part[ab]
    del partials

    # initial trace term, uu block only
    facets = mesh.facets_initial
    if len(facets):
        Mf = _facet_mass(mesh.vertices[facets])
        fr = np.repeat(facets, facets.shape[1], axis=1).ravel()
        fc = np.tile(facets, (1, facets.shape[1])).ravel()
        fpos = np.searchsorted(keys, fr * nv + fc)
        data[0, 0] += np.bincount(fpos, weights=Mf.ravel(), minlength=nnz)

    free = dofmap.interior_vertices
    shape_v = (nv, nv)
    Auu = sp.csr_matrix((data[0, 0], indices, indptr), shape=shape_v)[free][:, free]
    us = np.stack([data[0, c + 1] for c in range(d)], axis=-1)[:, None, :]
    Aus = sp.bsr_matrix((us, indices, indptr), shape=(nv, nv * d)).tocsr()[free]
    ss = np.stack(
        [np.stack([data[c + 1, e + 1] for e in range(d)], axis=-1) for c in range(d)], axis=1
    )
    Ass = sp.bsr_matrix((ss, indices, indptr), shape=(nv * d, nv * d)).tocsr()
    del data
    A = sp.bmat([[Auu, Aus], [Aus.T, Ass]], format="csr")
    A.sort_indices()

    # right-hand side
    intf, intf2 = element_data_integrals(mesh, problem.f, order, data_resolution(problem))
    g = mesh.grads
    bu = np.bincount(mesh.elements.ravel(), weights=(g[:, :, 0] * intf[:, None]).ravel(), minlength=nv)
    bs = np.zeros((nv, d))
    for c in range(d):
        bs[:, c] = np.bincount(mesh.elements.ravel(), weights=(-g[:, :, c + 1] * intf[:, None]).ravel(),
                               minlength=nv)
    data_norm2 = float(intf2.sum())
    if len(facets):
        load0, sq0 = initial_data_integrals(mesh, problem.u0, order)
        bu += np.bincount(facets.ravel(), weights=load0.ravel(), minlength=nv)
        data_norm2 += float(sq0.sum())
    rhs = np.empty(dofmap.n_total)
    rhs[: dofmap.n_u] = bu[free]
    rhs[dofmap.sigma_dofs] = bs
    return SparseSystem(A, rhs, dofmap, data_norm2)


def dump_matrix(system: SparseSystem, path) -> None:
    import scipy.io

    scipy.io.mmwrite(str(path), system.matrix, field="real", symmetry="general")
