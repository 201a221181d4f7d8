from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spacetime_ls.checks import random_refined_mesh, random_spacetime_mesh, random_spatial_mesh
from spacetime_ls.mesh import (
    MeshRefinementError,
    SpaceTimeMesh,
    SpatialMesh,
    TimePartition,
    bisect,
    bisect_elements,
    build_tensor_product_mesh,
    check_admissibility,
    cross_mesh,
    dump_mesh,
    element_geometry,
    element_quality,
    interval_mesh,
    lshape_mesh,
    split_prism,
    square_mesh,
)


def frac_volume(pts):
    # exact simplex volume with rational arithmetic (cofactor expansion)
    n = len(pts) - 1
    m = [[Fraction(pts[i + 1][j]) - Fraction(pts[0][j]) for j in range(n)] for i in range(n)]

    def det(a):
        if len(a) == 1:
            return a[0][0]
        return sum((-1) ** c * a[0][c] * det([r[:c] + r[c + 1:] for r in a[1:]]) for c in range(len(a)))

    fact = 1
    for k in range(2, n + 1):
        fact *= k
    return abs(det(m)) / fact


# -- split_prism -------------------------------------------------------------


def test_split_prism_d1():
    assert split_prism([0, 1, 2, 3]) == [(0, 1, 2), (1, 2, 3)]


def test_split_prism_d2_volumes():
    # prism over the unit triangle, h = 1
    base = [(0, 0), (1, 0), (0, 1)]
    coords = [(0,) + b for b in base] + [(1,) + b for b in base]
    simplices = split_prism(list(range(6)))
    assert len(simplices) == 3
    vols = [frac_volume([coords[i] for i in s]) for s in simplices]
    assert vols == [Fraction(1, 6)] * 3
    assert sum(vols) == Fraction(1, 2)


def test_split_prism_unit_square():
    coords = [(0, 0), (0, 1), (1, 0), (1, 1)]
    vols = [frac_volume([coords[i] for i in s]) for s in split_prism([0, 1, 2, 3])]
    assert sum(vols) == 1


@pytest.mark.parametrize("prism", [[0, 0, 1, 2], [1, 0, 2, 3], [0, 1, 2], [0, 1, 1, 2]])
def test_split_prism_errors(prism):
    with pytest.raises(ValueError):
        split_prism(prism)


# -- construction ------------------------------------------------------------


def test_tensor_counts():
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 2), interval_mesh(2))
    assert m.nelements == 8 and m.nvertices == 9
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), square_mesh(1))
    assert m.nelements == 6
    assert check_admissibility(m).passed


@pytest.mark.parametrize("d", [1, 2])
def test_tensor_admissible_random(d, rng):
    for _ in range(10):
        m = random_spacetime_mesh(rng, d)
        rep = check_admissibility(m)
        assert rep.passed, rep.messages
        assert m.volumes.sum() == pytest.approx(m.T * m.spatial_mesh.volumes.sum(), rel=1e-12)


def test_spatial_mesh_numbering():
    sm = SpatialMesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[2, 0, 1]]))
    assert sm.elements.tolist() == [[0, 1, 2]]
    with pytest.raises(ValueError):
        SpatialMesh(np.array([[0.0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]))


def test_time_partition():
    with pytest.raises(ValueError):
        TimePartition(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        TimePartition(np.array([0.1, 1.0]))
    assert TimePartition.uniform(2.0, 4).h == pytest.approx(0.5)


def test_element_geometry():
    m = SpaceTimeMesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]), np.array([2]))
    vol, grads, (x0, D) = element_geometry(m, 0)
    assert vol == pytest.approx(0.5)
    np.testing.assert_allclose(grads[0], [-1, -1])
    m2 = SpaceTimeMesh(m.vertices + [3.0, -2.0], m.elements, m.tags)
    np.testing.assert_allclose(element_geometry(m2, 0)[1], grads)
    tet = SpaceTimeMesh(np.vstack([np.zeros(3), np.eye(3)]), np.array([[0, 1, 2, 3]]), np.array([3]))
    assert element_geometry(tet, 0)[0] == pytest.approx(1 / 6)
    np.testing.assert_allclose(x0 + D @ np.array([0.5, 0.5]), [0.5, 0.5])


def test_degenerate_element():
    m = SpaceTimeMesh(np.array([[0.0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]), np.array([2]))
    with pytest.raises(ValueError):
        element_geometry(m, 0)


# -- boundary classification -------------------------------------------------


def test_cross_mesh_classes(cross):
    assert len(cross.facets_initial) == 1 and len(cross.facets_terminal) == 1
    assert len(cross.facets_lateral) == 2
    assert len(cross.facets_unclassified) == 0
    assert sorted(cross.nodes_lateral.tolist()) == [0, 1, 2, 3]
    assert check_admissibility(cross).passed


def test_single_element_mesh():
    tri = SpaceTimeMesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]), np.array([2]))
    assert check_admissibility(tri).passed
    tet = SpaceTimeMesh(np.vstack([np.zeros(3), np.eye(3)]), np.array([[0, 1, 2, 3]]), np.array([3]))
    assert check_admissibility(tet).passed


def test_volume_matches_cylinder(cross):
    assert cross.volumes.sum() == pytest.approx(cross.T * cross.omega_measure, rel=1e-14)


# -- bisection ---------------------------------------------------------------


def test_uniform_cross_refinement(cross):
    fine = bisect(cross, np.ones(4, dtype=bool))
    assert fine.nelements == 16
    assert check_admissibility(fine).passed
    assert bisect(cross, []).nelements == 4


def test_one_marked(cross):
    fine = bisect(cross, [0])
    rep = check_admissibility(fine)
    assert rep.passed, rep.messages
    assert fine.volumes.sum() == pytest.approx(1.0, rel=1e-12)


def test_hanging_node_detected(cross):
    # the first split cuts a boundary edge; splitting a child again cuts the
    # interior edge to the centre without touching the neighbour
    once = bisect_elements(cross, [0])
    assert check_admissibility(once).passed
    reports = [check_admissibility(bisect_elements(once, [k])) for k in range(once.nelements)]
    bad = [r for r in reports if not r.passed]
    assert bad
    assert all(r.bad_facets for r in bad)


def test_marked_gets_all_sons():
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), square_mesh(1))
    fine = bisect(m, [2])
    # every descendant of the marked element is at least d+1 generations deep
    kids = np.nonzero(fine.element_parents == 2)[0]
    assert len(kids) >= 8
    assert np.all(fine.levels[kids] >= 3)


def _nested(coarse, fine, rng):
    bary = rng.dirichlet(np.ones(fine.dim + 1), size=fine.nelements)
    pts = np.einsum("ei,eik->ek", bary, fine.vertices[fine.elements])
    parents = fine.element_parents
    cverts = coarse.vertices[coarse.elements[parents]]
    x0 = cverts[:, 0]
    lam_rest = np.einsum("ejk,ek->ej", coarse.grads[parents][:, 1:, :], pts - x0)
    lam = np.column_stack([1 - lam_rest.sum(1), lam_rest])
    return np.all(lam >= -1e-10)


@pytest.mark.parametrize("factory", [
    cross_mesh,
    lambda: build_tensor_product_mesh(TimePartition.uniform(1.0, 2), square_mesh(1)),
    lambda: build_tensor_product_mesh(TimePartition.uniform(1.0, 1), lshape_mesh()),
])
def test_random_refinement_invariants(factory, rng):
    m = factory()
    vol0 = m.volumes.sum()
    for _ in range(4):
        marked = rng.random(m.nelements) < 0.15
        fine = bisect(m, marked)
        rep = check_admissibility(fine)
        assert rep.passed, rep.messages
        assert abs(fine.volumes.sum() - vol0) <= 1e-12 * vol0
        assert _nested(m, fine, rng)
        assert np.all(fine.volumes > 0)
        m = fine


@pytest.mark.parametrize("dim,levels", [(2, 6), (3, 6)])
def test_shape_quality_bounded(dim, levels):
    if dim == 2:
        m = cross_mesh()
    else:
        m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), square_mesh(1))
    q0 = element_quality(m).min()
    qs = []
    for _ in range(levels):
        # one bisection generation per level keeps the 3d mesh small
        m = bisect(m, np.ones(m.nelements, dtype=bool), generations=1 if dim == 3 else None)
        qs.append(element_quality(m).min())
        assert check_admissibility(m).passed
    assert min(qs) > 0.2 * q0
    assert qs[-1] >= 0.99 * min(qs[: dim + 1])


def test_refinement_cap():
    m = cross_mesh()
    # reversing the vertex order breaks the tag compatibility; closure must still end
    bad = SpaceTimeMesh(m.vertices, m.elements[:, ::-1].copy(), np.full(4, 1))
    try:
        out = bisect(bad, [0])
    except MeshRefinementError:
        return
    assert check_admissibility(out).passed


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_random_tensor_meshes_refine(seed, d):
    rng = np.random.default_rng(seed)
    m = random_spacetime_mesh(rng, d)
    vol0 = m.volumes.sum()
    m = random_refined_mesh(rng, m, rounds=2)
    assert check_admissibility(m).passed
    assert m.volumes.sum() == pytest.approx(vol0, rel=1e-12)
    assert len(m.facets_unclassified) == 0


def test_edges_unique(cross):
    e = cross.edges()
    assert len(e) == 8
    assert len({tuple(x) for x in e}) == 8


def test_dump_mesh(tmp_path, cross):
    path = tmp_path / "m.txt"
    dump_mesh(cross, path, indicators=np.arange(4.0))
    lines = path.read_text().splitlines()
    assert lines[0] == "2 5 4"
    assert lines[6].split()[-1] == "0.0"
    classes = [ln.split()[0] for ln in lines[10:]]
    assert classes.count("initial") == 1 and classes.count("lateral") == 2
