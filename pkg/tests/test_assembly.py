import math

import numpy as np
import pytest
import scipy.io

import spacetime_ls.assembly as asm
from spacetime_ls.assembly import (
    assemble,
    dump_matrix,
    element_load,
    element_matrix,
    initial_facet_load,
    initial_facet_matrix,
)
from spacetime_ls.checks import random_refined_mesh, random_spacetime_mesh
from spacetime_ls.fe_space import DiscretePair, build_dof_map
from spacetime_ls.mesh import (
    SpaceTimeMesh,
    TimePartition,
    bisect,
    build_tensor_product_mesh,
    cross_mesh,
    interval_mesh,
    square_mesh,
)
from spacetime_ls.problems import ProblemSpec, catalog
from spacetime_ls.quadrature import composite_rule, simplex_rule

from oracles import bary_grads, energy_oracle


def local_energy_oracle(coords, rule_order=2):
    """Local LS matrix by quadrature of the integrand over explicit basis pairs."""
    n = coords.shape[1]
    d = n - 1
    G = bary_grads(coords)
    vol = abs(np.linalg.det(coords[1:] - coords[0])) / math.factorial(n)
    rule = simplex_rule(n, rule_order)
    nloc = (n + 1) * (d + 1)
    A = np.zeros((nloc, nloc))
    for lam, w in zip(rule.points, rule.weights):
        # per basis function: flux residual grad_x v - psi (d,), and dt v - div psi
        flux = np.zeros((nloc, d))
        res = np.zeros(nloc)
        for i in range(n + 1):
            k = i * (d + 1)
            flux[k] = G[i, 1:]
            res[k] = G[i, 0]
            for c in range(d):
                flux[k + 1 + c, c] = -lam[i]
                res[k + 1 + c] = -G[i, 1 + c]
        A += vol * w * (flux @ flux.T + np.outer(res, res))
    return A


def single(coords):
    coords = np.asarray(coords, float)
    n1 = len(coords)
    return SpaceTimeMesh(coords, np.arange(n1)[None], np.array([n1 - 1]))


def test_element_matrix_vs_quadrature(rng):
    for _ in range(10):
        coords = rng.uniform(-1, 1, (3, 2))
        if abs(np.linalg.det(coords[1:] - coords[0])) < 1e-2:
            continue
        m = single(coords)
        A, dofs = element_matrix(m, 0)
        np.testing.assert_allclose(A, local_energy_oracle(coords), atol=1e-12 * max(1, np.abs(A).max()))
        np.testing.assert_array_equal(A, A.T)


def test_element_matrix_tet(rng):
    coords = np.vstack([np.zeros(3), np.eye(3)]) + rng.uniform(-0.1, 0.1, (4, 3))
    A, _ = element_matrix(single(coords), 0)
    np.testing.assert_allclose(A, local_energy_oracle(coords), atol=1e-11)


def test_sigma_only_energy():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    A, _ = element_matrix(single(coords), 0)
    c = 1.7
    v = np.zeros(6)
    v[1::2] = c  # constant sigma, zero u
    assert v @ A @ v == pytest.approx(0.5 * c**2, rel=1e-14)


def test_initial_facet_matrix():
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), interval_mesh(4))
    M, dofs = initial_facet_matrix(m, 1)
    h = 0.25
    np.testing.assert_allclose(M, h / 6 * np.array([[2, 1], [1, 2]]), rtol=1e-14)
    M0, d0 = initial_facet_matrix(m, 0)
    assert -1 in d0.tolist()


def test_initial_facet_all_lateral():
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), interval_mesh(1))
    _, dofs = initial_facet_matrix(m, 0)
    assert np.all(dofs < 0)
    pr = ProblemSpec("t", 1, lambda: m, lambda p: np.ones(len(p)), lambda x: np.ones(len(x)))
    s = assemble(m, build_dof_map(m), pr)
    assert s.n == m.nvertices  # only sigma unknowns remain


def test_element_load(rng):
    m = cross_mesh()
    b, _ = element_load(m, 0, lambda p: np.zeros(len(p)))
    assert np.all(b == 0)
    b, _ = element_load(m, 0, lambda p: np.ones(len(p)))
    g = m.grads[0]
    np.testing.assert_allclose(b[0::2], g[:, 0] * m.volumes[0])
    np.testing.assert_allclose(b[1::2], -g[:, 1] * m.volumes[0])
    # quartic data: the order-4 data rule and an order-5 oracle agree
    f = lambda p: (1 + p[:, 0] ** 2 * p[:, 1] ** 2 - p[:, 1] ** 3)  # noqa: E731
    b, _ = element_load(m, 2, f)
    r5 = simplex_rule(2, 5)
    intf = m.volumes[2] * r5.weights @ f(r5.physical_points(m.vertices[m.elements[2]]))
    np.testing.assert_allclose(b[0::2], m.grads[2][:, 0] * intf, rtol=1e-10)


def test_initial_facet_load():
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), interval_mesh(4))
    b, _ = initial_facet_load(m, 1, lambda x: np.zeros(len(x)))
    assert np.all(b == 0)
    b, _ = initial_facet_load(m, 1, lambda x: np.ones(len(x)))
    np.testing.assert_allclose(b, [0.125, 0.125])
    hat = catalog("ex2_1d").u0
    fine = composite_rule(1, 4, 64)
    for k in range(len(m.facets_initial)):
        b, _ = initial_facet_load(m, k, hat)
        f = m.facets_initial[k]
        xs = m.vertices[f][:, 1:]
        pts = fine.physical_points(xs)
        ref = abs(xs[1, 0] - xs[0, 0]) * (fine.points.T @ (fine.weights * hat(pts)))
        np.testing.assert_allclose(b, ref, rtol=1e-10, atol=1e-14)


def zero_problem(mesh):
    z = lambda p: np.zeros(len(p))  # noqa: E731
    return ProblemSpec("zero", mesh.space_dim, lambda: mesh, z, z)


def test_zero_data(cross):
    from spacetime_ls.linear_solver import pcg

    s = assemble(cross, None, zero_problem(cross))
    assert np.all(s.rhs == 0)
    x, stats = pcg(s)
    assert np.all(x == 0) and stats.converged


def global_oracle(mesh, dm, problem):
    """Element loop with the dense local routines."""
    n = dm.n_total
    A = np.zeros((n, n))
    b = np.zeros(n)
    for e in range(mesh.nelements):
        Ae, dofs = element_matrix(mesh, e, dm)
        be, _ = element_load(mesh, e, problem.f, dm)
        keep = dofs >= 0
        A[np.ix_(dofs[keep], dofs[keep])] += Ae[np.ix_(keep, keep)]
        b[dofs[keep]] += be[keep]
    for k in range(len(mesh.facets_initial)):
        Mf, dofs = initial_facet_matrix(mesh, k, dm)
        bf, _ = initial_facet_load(mesh, k, problem.u0, dm)
        keep = dofs >= 0
        A[np.ix_(dofs[keep], dofs[keep])] += Mf[np.ix_(keep, keep)]
        b[dofs[keep]] += bf[keep]
    return A, b


@pytest.mark.parametrize("d", [1, 2])
def test_assembly_matches_element_loop(d, rng):
    m = random_refined_mesh(rng, random_spacetime_mesh(rng, d), rounds=1)
    pr = catalog("ex1_1d" if d == 1 else "ex1_2d")
    dm = build_dof_map(m)
    s = assemble(m, dm, pr)
    A, b = global_oracle(m, dm, pr)
    np.testing.assert_allclose(s.matrix.toarray(), A, atol=1e-12 * np.abs(A).max())
    np.testing.assert_allclose(s.rhs, b, atol=1e-12 * np.abs(b).max())
    v = rng.standard_normal(dm.n_total)
    np.testing.assert_allclose(s.matrix @ v, A @ v, atol=1e-11 * np.abs(A @ v).max())


@pytest.mark.parametrize("d", [1, 2])
def test_energy_identity(d, rng):
    m = random_refined_mesh(rng, random_spacetime_mesh(rng, d), rounds=1)
    dm = build_dof_map(m)
    s = assemble(m, dm, catalog("ex1_1d" if d == 1 else "ex1_2d"))
    for _ in range(5):
        v = rng.standard_normal(dm.n_total)
        want = energy_oracle(m, DiscretePair(v, dm, m))
        assert v @ (s.matrix @ v) == pytest.approx(want, rel=1e-10)


@pytest.mark.parametrize("d", [1, 2])
def test_spd_and_sparsity(d, rng):
    m = random_refined_mesh(rng, random_spacetime_mesh(rng, d), rounds=1)
    s = assemble(m, None, catalog("ex1_1d" if d == 1 else "ex1_2d"))
    A = s.matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    X = rng.standard_normal((A.shape[0], 100))
    assert np.all(np.einsum("ij,ij->j", X, A @ X) > 0)
    # row sparsity bounded by (max vertex degree + 1) (d + 1)
    edges = m.edges()
    deg = np.bincount(edges.ravel(), minlength=m.nvertices).max()
    assert np.diff(A.indptr).max() <= (deg + 1) * (d + 1)


def test_threads_identical():
    m = build_tensor_product_mesh(TimePartition.uniform(1.0, 2), square_mesh(3))
    for _ in range(2):
        m = bisect(m, np.ones(m.nelements, dtype=bool), generations=1)
    pr = catalog("ex1_2d")
    old = asm.CHUNK
    asm.CHUNK = 64  # force several chunks
    try:
        a = assemble(m, None, pr, threads=1)
        b = assemble(m, None, pr, threads=3)
    finally:
        asm.CHUNK = old
    assert (a.matrix != b.matrix).nnz == 0
    np.testing.assert_array_equal(a.rhs, b.rhs)


def test_dump_matrix(tmp_path, cross):
    s = assemble(cross, None, catalog("ex1_1d"))
    path = tmp_path / "a.mtx"
    dump_matrix(s, path)
    B = scipy.io.mmread(str(path)).toarray()
    np.testing.assert_allclose(B, s.matrix.toarray(), rtol=1e-15)
