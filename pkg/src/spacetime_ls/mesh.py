"""Simplicial space-time meshes of J x Omega and their refinement.

Points are stored with the time coordinate first: ``(t, x_1, ..., x_d)``.
Elements are (d+2)-tuples of vertex indices whose order, together with an
integer type tag, encodes the newest vertex bisection state: an element
``(x_0, ..., x_n)`` with tag ``k`` is bisected across the edge ``x_0 x_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

__all__ = [
    "SpatialMesh",
    "TimePartition",
    "SpaceTimeMesh",
    "AdmissibilityReport",
    "MeshRefinementError",
    "simplex_geometry",
    "simplex_measure",
    "split_prism",
    "build_tensor_product_mesh",
    "check_admissibility",
    "bisect",
    "bisect_elements",
    "element_geometry",
    "element_quality",
    "cross_mesh",
    "interval_mesh",
    "square_mesh",
    "lshape_mesh",
    "dump_mesh",
]

GEOM_TOL = 1e-12


class MeshRefinementError(RuntimeError):
    """Raised when the bisection closure exceeds its creation budget."""


# ----------------------------------------------------------------------------
# geometry helpers
# ----------------------------------------------------------------------------


def simplex_geometry(coords):
    """Volumes and barycentric gradients of full-dimensional simplices.

    Parameters
    ----------
    coords : ndarray, shape (E, m+1, m)

    Returns
    -------
    vol : ndarray (E,)
        Unsigned volumes.
    grads : ndarray (E, m+1, m)
        Constant gradients of the barycentric coordinates.
    """
    coords = np.asarray(coords, dtype=float)
    m = coords.shape[-1]
    D = np.swapaxes(coords[:, 1:, :] - coords[:, :1, :], 1, 2)  # columns = edges
    det = np.linalg.det(D)
    if np.any(np.abs(det) <= 0.0):
        raise ValueError("degenerate simplex")
    inv = np.linalg.inv(D)
    grads = np.empty_like(coords)
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    vol = np.abs(det) / math.factorial(m)
    return vol, grads


def simplex_measure(coords):
    """k-dimensional measure of k-simplices embedded in R^m, coords (E, k+1, m)."""
    coords = np.asarray(coords, dtype=float)
    k = coords.shape[-2] - 1
    if k == 0:
        return np.ones(coords.shape[0])
    D = coords[:, 1:, :] - coords[:, :1, :]
    gram = D @ np.swapaxes(D, 1, 2)
    return np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(k)


def _signed_det(coords):
    D = coords[:, 1:, :] - coords[:, :1, :]
    return np.linalg.det(D)


# ----------------------------------------------------------------------------
# spatial meshes and time partitions
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialMesh:
    """Conforming simplicial mesh of Omega in R^d with consistent numbering."""

    vertices: np.ndarray  # (N, d)
    elements: np.ndarray  # (M, d+1), rows strictly increasing

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        e = np.sort(np.asarray(self.elements, dtype=np.int64), axis=1)
        if np.any(np.diff(e, axis=1) <= 0):
            raise ValueError("repeated vertex in spatial element")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "elements", e)
        if e.shape[1] != v.shape[1] + 1:
            raise ValueError("element arity does not match spatial dimension")
        vol = simplex_measure(v[e])
        if np.any(vol <= GEOM_TOL * self.diameter ** v.shape[1]):
            raise ValueError("degenerate spatial element")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    @cached_property
    def volumes(self):
        return simplex_measure(self.vertices[self.elements])

    @cached_property
    def boundary_facets(self):
        facets, counts, _, _ = _facet_table(self.elements, len(self.vertices))
        return facets[counts == 1]

    @cached_property
    def boundary_vertices(self):
        flags = np.zeros(len(self.vertices), dtype=bool)
        flags[self.boundary_facets.ravel()] = True
        return flags

    @cached_property
    def h(self) -> float:
        d = self.dim
        hmax = 0.0
        for i, j in combinations(range(d + 1), 2):
            le = np.linalg.norm(self.vertices[self.elements[:, i]] - self.vertices[self.elements[:, j]], axis=1)
            hmax = max(hmax, float(le.max()))
        return hmax


@dataclass(frozen=True)
class TimePartition:
    nodes: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.nodes, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("time partition needs at least two nodes")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must start at 0 and increase strictly")
        object.__setattr__(self, "nodes", t)

    @classmethod
    def uniform(cls, T: float, nslabs: int) -> "TimePartition":
        return cls(np.linspace(0.0, T, nslabs + 1))

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def h(self) -> float:
        return float(np.diff(self.nodes).max())


def interval_mesh(n: int, a: float = 0.0, b: float = 1.0) -> SpatialMesh:
    x = np.linspace(a, b, n + 1)
    return SpatialMesh(x[:, None], np.column_stack([np.arange(n), np.arange(1, n + 1)]))


def square_mesh(n: int, lower=(0.0, 0.0), upper=(1.0, 1.0)) -> SpatialMesh:
    """Uniform triangulation of a rectangle; each cell split along its (0,0)-(1,1) diagonal."""
    xs = np.linspace(lower[0], upper[0], n + 1)
    ys = np.linspace(lower[1], upper[1], n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[:-1, 1:].ravel()
    d = idx[1:, 1:].ravel()
    tris = np.vstack([np.column_stack([a, b, d]), np.column_stack([a, c, d])])
    return SpatialMesh(verts, tris)


def lshape_mesh() -> SpatialMesh:
    """(-1,1)^2 minus conv{(0,0),(0,-1),(1,-1)}, seven triangles."""
    verts = np.array(
        [
            [-1, -1], [0, -1], [1, -1],
            [-1, 0], [0, 0], [1, 0],
            [-1, 1], [0, 1], [1, 1],
        ],
        dtype=float,
    )
    tris = [
        [0, 1, 4], [0, 3, 4],  # lower left
        [2, 4, 5],  # lower right, the cut-away half is conv(1, 2, 4)
        [3, 4, 7], [3, 6, 7],  # upper left
        [4, 5, 8], [4, 7, 8],  # upper right
    ]
    return SpatialMesh(verts, np.array(tris))


# ----------------------------------------------------------------------------
# facet bookkeeping
# ----------------------------------------------------------------------------


def _facet_table(elements, nv):
    """Unique facets (sorted vertex tuples) with counts, owner element and local index."""
    E, m1 = elements.shape
    local = np.array([[j for j in range(m1) if j != i] for i in range(m1)])
    allf = np.sort(elements[:, local], axis=2).reshape(-1, m1 - 1)
    keys = _row_keys(allf, nv)
    uniq, first, counts = np.unique(keys, return_index=True, return_counts=True)
    return allf[first], counts, first // m1, first % m1


def _row_keys(rows, nv):
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape[1] == 1:
        return rows[:, 0].copy()
    if nv ** rows.shape[1] < 2 ** 62:
        key = np.zeros(len(rows), dtype=np.int64)
        for j in range(rows.shape[1]):
            key = key * nv + rows[:, j]
        return key
    # fall back to a structured view for very large meshes
    r = np.ascontiguousarray(rows)
    return r.view([("", r.dtype)] * r.shape[1]).ravel()


def _edge_keys(a, b):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return (lo << 32) | hi


# ----------------------------------------------------------------------------
# the space-time mesh
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class SpaceTimeMesh:
    """Simplicial partition of the space-time cylinder (0, T) x Omega.

    A mesh is treated as immutable once constructed; refinement returns a new
    object.  ``lateral_patches`` are the lateral boundary facets of the coarse
    mesh the instance descends from and are used to classify refined facets.
    """

    vertices: np.ndarray
    elements: np.ndarray
    tags: np.ndarray
    T: float = 1.0
    levels: np.ndarray | None = None
    lateral_patches: np.ndarray | None = None
    vertex_parents: np.ndarray | None = None
    element_parents: np.ndarray | None = None
    prisms: np.ndarray | None = None
    spatial_mesh: SpatialMesh | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.int64)
        n = self.vertices.shape[1]
        if self.elements.shape[1] != n + 1:
            raise ValueError("elements must have d+2 vertices")
        if self.levels is None:
            self.levels = np.zeros(len(self.elements), dtype=np.int64)
        if self.vertex_parents is None:
            self.vertex_parents = np.full((len(self.vertices), 2), -1, dtype=np.int64)
        if self.lateral_patches is None:
            self.lateral_patches = self._initial_lateral_patches()

    # -- basic sizes ---------------------------------------------------------
    @property
    def dim(self) -> int:
        """Space-time dimension d + 1."""
        return self.vertices.shape[1]

    @property
    def space_dim(self) -> int:
        return self.dim - 1

    @property
    def nvertices(self) -> int:
        return len(self.vertices)

    @property
    def nelements(self) -> int:
        return len(self.elements)

    @cached_property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    # -- geometry ------------------------------------------------------------
    @cached_property
    def _geometry(self):
        return simplex_geometry(self.vertices[self.elements])

    @property
    def volumes(self) -> np.ndarray:
        return self._geometry[0]

    @property
    def grads(self) -> np.ndarray:
        return self._geometry[1]

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return _signed_det(self.vertices[self.elements]) / math.factorial(self.dim)

    # -- facets --------------------------------------------------------------
    @cached_property
    def _facets(self):
        return _facet_table(self.elements, self.nvertices)

    @cached_property
    def _boundary_classes(self):
        facets, counts, owner, local = self._facets
        bnd = counts == 1
        bf, bo = facets[bnd], owner[bnd]
        t = self.vertices[bf, 0]
        tol = GEOM_TOL * max(self.diameter, 1.0)
        initial = np.all(np.abs(t) <= tol, axis=1)
        terminal = np.all(np.abs(t - self.T) <= tol, axis=1) & ~initial
        rest = ~(initial | terminal)
        lateral = np.zeros(len(bf), dtype=bool)
        if rest.any():
            lateral[rest] = self._on_lateral(self.vertices[bf[rest]].mean(axis=1))
        unclassified = rest & ~lateral
        return {
            "initial": (bf[initial], bo[initial]),
            "terminal": (bf[terminal], bo[terminal]),
            "lateral": (bf[lateral], bo[lateral]),
            "unclassified": (bf[unclassified], bo[unclassified]),
        }

    @property
    def facets_initial(self) -> np.ndarray:
        return self._boundary_classes["initial"][0]

    @property
    def facets_initial_owner(self) -> np.ndarray:
        return self._boundary_classes["initial"][1]

    @property
    def facets_terminal(self) -> np.ndarray:
        return self._boundary_classes["terminal"][0]

    @property
    def facets_terminal_owner(self) -> np.ndarray:
        return self._boundary_classes["terminal"][1]

    @property
    def facets_lateral(self) -> np.ndarray:
        return self._boundary_classes["lateral"][0]

    @property
    def facets_unclassified(self) -> np.ndarray:
        return self._boundary_classes["unclassified"][0]

    @cached_property
    def nodes_lateral(self) -> np.ndarray:
        return np.unique(self.facets_lateral.ravel())

    @cached_property
    def lateral_flags(self) -> np.ndarray:
        flags = np.zeros(self.nvertices, dtype=bool)
        flags[self.nodes_lateral] = True
        return flags

    @cached_property
    def omega_measure(self) -> float:
        f = self.facets_initial
        return float(simplex_measure(self.vertices[f][:, :, 1:]).sum()) if len(f) else 0.0

    def _initial_lateral_patches(self):
        facets, counts, _, _ = self._facets
        bf = facets[counts == 1]
        t = self.vertices[bf, 0]
        tol = GEOM_TOL * max(self.diameter, 1.0)
        timeplane = np.all(np.abs(t) <= tol, axis=1) | np.all(np.abs(t - self.T) <= tol, axis=1)
        return self.vertices[bf[~timeplane]]

    def _on_lateral(self, points):
        """Test whether points lie in one of the coarse lateral boundary facets."""
        patches = self.lateral_patches
        hit = np.zeros(len(points), dtype=bool)
        if patches is None or len(patches) == 0:
            return hit
        tol = GEOM_TOL * max(self.diameter, 1.0)
        for P in patches:
            D = (P[1:] - P[0]).T  # (n, n-1)
            coef, *_ = np.linalg.lstsq(D, (points - P[0]).T, rcond=None)
            resid = np.linalg.norm(D @ coef - (points - P[0]).T, axis=0)
            lam = np.vstack([1.0 - coef.sum(axis=0), coef])
            hit |= (resid <= tol) & np.all(lam >= -1e-10, axis=0)
        return hit

    # -- misc ----------------------------------------------------------------
    def edges(self) -> np.ndarray:
        pairs = list(combinations(range(self.dim + 1), 2))
        e = np.concatenate([self.elements[:, [i, j]] for i, j in pairs])
        e = np.sort(e, axis=1)
        keys = np.unique(_edge_keys(e[:, 0], e[:, 1]))
        return np.column_stack([keys >> 32, keys & 0xFFFFFFFF])

    def locate(self, points, candidates=None):
        """Index of an element containing each point (-1 if none); brute force."""
        points = np.atleast_2d(points)
        cand = np.arange(self.nelements) if candidates is None else np.asarray(candidates)
        found = np.full(len(points), -1, dtype=np.int64)
        x0 = self.vertices[self.elements[cand, 0]]
        g = self.grads[cand]
        for i, p in enumerate(points):
            lam_rest = np.einsum("ejk,ek->ej", g[:, 1:, :], p - x0)
            lam = np.column_stack([1.0 - lam_rest.sum(1), lam_rest])
            ok = np.nonzero(np.all(lam >= -1e-10, axis=1))[0]
            if len(ok):
                found[i] = cand[ok[0]]
        return found


def element_geometry(mesh: SpaceTimeMesh, element: int):
    """Volume, barycentric gradients and the reference-to-physical affine map.

    The map is returned as ``(x0, D)`` with ``x = x0 + D @ xi`` for reference
    coordinates ``xi`` in the unit simplex.
    """
    coords = mesh.vertices[mesh.elements[element]]
    vol, grads = simplex_geometry(coords[None])
    D = (coords[1:] - coords[0]).T
    return float(vol[0]), grads[0], (coords[0].copy(), D)


def element_quality(mesh: SpaceTimeMesh) -> np.ndarray:
    """Inradius / diameter for every element."""
    coords = mesh.vertices[mesh.elements]
    n = mesh.dim
    face_area = np.zeros(mesh.nelements)
    for i in range(n + 1):
        idx = [j for j in range(n + 1) if j != i]
        face_area += simplex_measure(coords[:, idx, :])
    inradius = n * mesh.volumes / face_area
    diam = np.zeros(mesh.nelements)
    for i, j in combinations(range(n + 1), 2):
        diam = np.maximum(diam, np.linalg.norm(coords[:, i] - coords[:, j], axis=1))
    return inradius / diam


# ----------------------------------------------------------------------------
# tensor-product construction
# ----------------------------------------------------------------------------


def split_prism(prism):
    """Split a prism over a d-simplex into d+1 simplices.

    ``prism`` lists the bottom vertices p'_1..p'_{d+1} followed by the top
    vertices p''_1..p''_{d+1}, the spatial vertices in consistent order.
    Returns the windows (p'_l, ..., p'_{d+1}, p''_1, ..., p''_l), l = 1..d+1.
    """
    prism = list(prism)
    if len(prism) % 2 or len(prism) < 4:
        raise ValueError("prism needs 2(d+1) vertices, d >= 1")
    m = len(prism) // 2
    bottom, top = prism[:m], prism[m:]
    if len(set(bottom)) != m or len(set(top)) != m or set(bottom) & set(top):
        raise ValueError("degenerate prism")
    if any(bottom[i] >= bottom[i + 1] for i in range(m - 1)):
        raise ValueError("prism vertices are not in consistent (increasing) order")
    return [tuple(prism[l:l + m + 1]) for l in range(m)]


def _longest_edge_order(vertices, tris):
    """Reorder triangles as (a, c, b) with a-b the longest edge (tag 2)."""
    coords = vertices[tris]
    out = np.empty_like(tris)
    lengths = np.stack(
        [
            np.linalg.norm(coords[:, 1] - coords[:, 2], axis=1),  # opposite 0
            np.linalg.norm(coords[:, 0] - coords[:, 2], axis=1),  # opposite 1
            np.linalg.norm(coords[:, 0] - coords[:, 1], axis=1),  # opposite 2
        ],
        axis=1,
    )
    # ties resolved towards the smallest opposite vertex position
    rel = lengths >= lengths.max(axis=1, keepdims=True) * (1 - 1e-12)
    opp = np.argmax(rel, axis=1)
    for o in range(3):
        sel = opp == o
        others = [j for j in range(3) if j != o]
        out[sel] = np.column_stack([tris[sel, others[0]], tris[sel, o], tris[sel, others[1]]])
    return out


def build_tensor_product_mesh(tp: TimePartition, sm: SpatialMesh) -> SpaceTimeMesh:
    """Split every (time slab x spatial element) prism into d+1 simplices."""
    d = sm.dim
    ns = len(sm.vertices)
    nt = len(tp.nodes)
    verts = np.column_stack(
        [np.repeat(tp.nodes, ns), np.tile(sm.vertices, (nt, 1))]
    )
    E = sm.elements
    windows = []
    prisms = []
    for k in range(nt - 1):
        bottom = E + k * ns
        top = E + (k + 1) * ns
        full = np.hstack([bottom, top])
        for l in range(d + 1):
            windows.append(full[:, l:l + d + 2])
            prisms.append(np.column_stack([np.arange(len(E)), np.full(len(E), k)]))
    # interleave so the d+1 simplices of one prism are contiguous
    W = np.stack(windows).reshape(nt - 1, d + 1, len(E), d + 2).transpose(0, 2, 1, 3).reshape(-1, d + 2)
    P = np.stack(prisms).reshape(nt - 1, d + 1, len(E), 2).transpose(0, 2, 1, 3).reshape(-1, 2)
    if d == 1:
        W = _longest_edge_order(verts, W)
    tags = np.full(len(W), d + 1, dtype=np.int64)
    return SpaceTimeMesh(verts, W, tags, T=tp.T, prisms=P, spatial_mesh=sm)


def cross_mesh(T: float = 1.0) -> SpaceTimeMesh:
    """(0,T) x (0,1) split into four equal triangles by both diagonals."""
    verts = np.array([[0, 0], [0, 1], [T, 1], [T, 0], [T / 2, 0.5]], dtype=float)
    c = 4
    tris = np.array([[0, c, 1], [1, c, 2], [2, c, 3], [3, c, 0]])
    return SpaceTimeMesh(verts, tris, np.full(4, 2), T=T)


# ----------------------------------------------------------------------------
# admissibility
# ----------------------------------------------------------------------------


@dataclass
class AdmissibilityReport:
    passed: bool
    bad_facets: list
    messages: list

    def __bool__(self):
        return self.passed


def check_admissibility(mesh: SpaceTimeMesh) -> AdmissibilityReport:
    """Conformity check: facets matched in pairs, unmatched ones on the boundary."""
    facets, counts, _, _ = mesh._facets
    msgs = []
    bad = [tuple(int(v) for v in f) for f in facets[counts > 2]]
    if bad:
        msgs.append(f"{len(bad)} facets shared by more than two elements")
    hanging = [tuple(int(v) for v in f) for f in mesh.facets_unclassified]
    if hanging:
        msgs.append(f"{len(hanging)} unmatched interior facets (hanging nodes)")
    bad.extend(hanging)
    if np.any(mesh.volumes <= 0):
        msgs.append("degenerate element")
    return AdmissibilityReport(not msgs, bad, msgs)


# ----------------------------------------------------------------------------
# newest vertex bisection
# ----------------------------------------------------------------------------


class _Refiner:
    """Mutable working state for one call of :func:`bisect`."""

    def __init__(self, mesh: SpaceTimeMesh):
        self.n = mesh.dim
        self.verts = [mesh.vertices]
        self.nv = mesh.nvertices
        self.vparents = [mesh.vertex_parents]
        self.elems = mesh.elements.copy()
        self.tags = mesh.tags.copy()
        self.levels = mesh.levels.copy()
        self.origin = np.arange(mesh.nelements)
        self.target = np.full(mesh.nelements, -1, dtype=np.int64)
        self.mid_keys = np.empty(0, dtype=np.int64)
        self.mid_vals = np.empty(0, dtype=np.int64)
        self.created = 0
        self.budget = 100 * max(mesh.nelements, 1)
        self._pairs = list(combinations(range(self.n + 1), 2))

    # -- edges ---------------------------------------------------------------
    def ref_keys(self, idx):
        X = self.elems[idx]
        return _edge_keys(X[:, 0], X[np.arange(len(idx)), self.tags[idx]])

    def all_edge_keys(self):
        E = self.elems
        return np.stack([_edge_keys(E[:, i], E[:, j]) for i, j in self._pairs], axis=1)

    def has_midpoint(self, keys):
        if len(self.mid_keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self.mid_keys, keys)
        pos = np.minimum(pos, len(self.mid_keys) - 1)
        return self.mid_keys[pos] == keys

    def midpoints(self, keys):
        """Vertex index of the midpoint of each edge key, creating as needed."""
        uniq = np.unique(keys)
        new = uniq[~self.has_midpoint(uniq)]
        if len(new):
            a = (new >> 32).astype(np.int64)
            b = (new & 0xFFFFFFFF).astype(np.int64)
            coords = np.concatenate(self.verts)
            self.verts = [coords, 0.5 * (coords[a] + coords[b])]
            self.vparents.append(np.column_stack([a, b]))
            ids = np.arange(self.nv, self.nv + len(new))
            self.nv += len(new)
            keys_all = np.concatenate([self.mid_keys, new])
            vals_all = np.concatenate([self.mid_vals, ids])
            order = np.argsort(keys_all, kind="stable")
            self.mid_keys, self.mid_vals = keys_all[order], vals_all[order]
        pos = np.searchsorted(self.mid_keys, keys)
        return self.mid_vals[pos]

    # -- one simultaneous bisection of a set of elements ----------------------
    def split(self, idx):
        n = self.n
        X = self.elems[idx]
        k = self.tags[idx]
        rows = np.arange(len(idx))
        z = self.midpoints(_edge_keys(X[:, 0], X[rows, k]))
        c1 = X.copy()
        c1[rows, k] = z
        c2 = X.copy()
        for kk in range(1, n + 1):
            sel = k == kk
            if not sel.any():
                continue
            c2[sel, :kk] = X[sel, 1:kk + 1]
            c2[sel, kk] = z[sel]
        newtag = np.where(k > 1, k - 1, n)
        self.elems[idx] = c1
        self.tags[idx] = newtag
        self.levels[idx] += 1
        self.elems = np.vstack([self.elems, c2])
        self.tags = np.concatenate([self.tags, newtag])
        self.levels = np.concatenate([self.levels, self.levels[idx]])
        self.origin = np.concatenate([self.origin, self.origin[idx]])
        self.target = np.concatenate([self.target, self.target[idx]])
        self.created += len(idx)
        if self.created > self.budget:
            raise MeshRefinementError(
                "bisection closure exceeded its budget; initial tags are incompatible"
            )

    def refine_round(self, sel):
        """Bisect ``sel`` once and close the mesh with further bisections."""
        while sel.any():
            ekeys = self.all_edge_keys()
            cut = np.unique(self.ref_keys(np.nonzero(sel)[0]))
            need = sel.copy()
            while True:
                grow = need | np.isin(ekeys, cut).any(axis=1)
                if (grow == need).all():
                    break
                added = np.nonzero(grow & ~need)[0]
                need = grow
                cut = np.union1d(cut, self.ref_keys(added))
            self.split(np.nonzero(need)[0])
            sel = self.has_midpoint(self.all_edge_keys()).any(axis=1)

    def result(self, mesh: SpaceTimeMesh) -> SpaceTimeMesh:
        return SpaceTimeMesh(
            np.concatenate(self.verts),
            self.elems,
            self.tags,
            T=mesh.T,
            levels=self.levels,
            lateral_patches=mesh.lateral_patches,
            vertex_parents=np.concatenate(self.vparents),
            element_parents=self.origin,
        )


def bisect(mesh: SpaceTimeMesh, marked, generations: int | None = None) -> SpaceTimeMesh:
    """Refine the marked elements into 2**generations descendants each.

    ``generations`` defaults to d+1, i.e. 2^{d+1} sons per marked element.
    Further elements are bisected as needed to keep the mesh conforming.  The
    returned mesh records ``vertex_parents`` (edge endpoints of every new
    vertex) and ``element_parents`` (index of the containing input element).
    """
    marked = np.asarray(marked)
    mask = np.zeros(mesh.nelements, dtype=bool)
    if marked.dtype == bool:
        mask[:] = marked
    else:
        mask[marked.astype(np.int64)] = True
    if generations is None:
        generations = mesh.dim
    if not mask.any():
        return SpaceTimeMesh(
            mesh.vertices, mesh.elements, mesh.tags, T=mesh.T, levels=mesh.levels,
            lateral_patches=mesh.lateral_patches,
            vertex_parents=np.full((mesh.nvertices, 2), -1, dtype=np.int64),
            element_parents=np.arange(mesh.nelements), prisms=mesh.prisms,
            spatial_mesh=mesh.spatial_mesh,
        )
    r = _Refiner(mesh)
    # vertex_parents of the result refer only to vertices created by this call
    r.vparents = [np.full((mesh.nvertices, 2), -1, dtype=np.int64)]
    r.target[mask] = mesh.levels[mask] + generations
    while True:
        sel = r.levels < r.target
        if not sel.any():
            break
        r.refine_round(sel)
    return r.result(mesh)


def bisect_elements(mesh: SpaceTimeMesh, idx) -> SpaceTimeMesh:
    """Bisect the given elements once, without any conformity closure."""
    r = _Refiner(mesh)
    r.vparents = [np.full((mesh.nvertices, 2), -1, dtype=np.int64)]
    r.split(np.atleast_1d(np.asarray(idx, dtype=np.int64)))
    return r.result(mesh)


# ----------------------------------------------------------------------------
# export
# ----------------------------------------------------------------------------


def dump_mesh(mesh: SpaceTimeMesh, path, indicators=None) -> None:
    """Plain-text export: header, vertices, elements, classified boundary facets."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.nvertices} {mesh.nelements}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for i, el in enumerate(mesh.elements):
            line = " ".join(str(int(j)) for j in el)
            if indicators is not None:
                line += f" {float(indicators[i])!r}"
            fh.write(line + "\n")
        for name in ("initial", "terminal", "lateral"):
            for f in getattr(mesh, f"facets_{name}"):
                fh.write(name + " " + " ".join(str(int(j)) for j in f) + "\n")
