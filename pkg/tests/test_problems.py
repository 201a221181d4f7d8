import numpy as np
import pytest
import sympy as sy

from spacetime_ls.mesh import check_admissibility
from spacetime_ls.problems import PROBLEM_IDS, catalog, eoc, fitted_rate

t, x, y = sy.symbols("t x y")
SMOOTH = {
    "ex1_1d": ((t, x), sy.cos(sy.pi * t) * sy.sin(sy.pi * x)),
    "ex1_2d": ((t, x, y), sy.cos(sy.pi * t) * sy.sin(sy.pi * x) * sy.sin(sy.pi * y)),
}


@pytest.mark.parametrize("pid", sorted(SMOOTH))
def test_smooth_problem_consistency(pid, rng):
    """Callbacks agree with the symbolic solution and its heat-equation residual."""
    syms, u = SMOOTH[pid]
    pr = catalog(pid)
    pts = rng.random((100, len(syms)))
    cols = [pts[:, i] for i in range(len(syms))]
    lam = lambda e: np.broadcast_to(sy.lambdify(syms, e, "numpy")(*cols), (100,))  # noqa: E731
    lap = sum(sy.diff(u, s, 2) for s in syms[1:])
    np.testing.assert_allclose(pr.u(pts), lam(u), atol=1e-12)
    np.testing.assert_allclose(pr.dt_u(pts), lam(sy.diff(u, t)), atol=1e-12)
    np.testing.assert_allclose(pr.f(pts), lam(sy.diff(u, t) - lap), atol=1e-10)
    grad = np.column_stack([lam(sy.diff(u, s)) for s in syms[1:]])
    np.testing.assert_allclose(pr.grad_u(pts), grad, atol=1e-12)
    at0 = pts.copy()
    at0[:, 0] = 0.0
    np.testing.assert_allclose(pr.u0(pts[:, 1:]), pr.u(at0), atol=1e-14)


def test_moving_source():
    f = catalog("ex3_1d").f
    pts = np.array([[0.3, 0.38], [0.3, 0.5], [0.05, 0.12], [0.6, 0.68], [0.3, 0.34]])
    assert f(pts).tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_constant_data():
    rng = np.random.default_rng(0)
    p3 = rng.random((20, 3))
    assert np.all(catalog("ex3_2d").f(p3) == 0) and np.all(catalog("ex3_2d").u0(p3[:, 1:]) == 1)
    p2 = rng.random((20, 2))
    assert np.all(catalog("ex4_1d").f(p2) == 2) and np.all(catalog("ex4_1d").u0(p2[:, 1:]) == 1)
    assert np.all(catalog("ex2_1d").f(p2) == 1)


def test_hat_initial_data():
    u0 = catalog("ex2_1d").u0
    xs = np.array([[0.0], [0.25], [0.5], [0.75], [1.0]])
    np.testing.assert_allclose(u0(xs), [0, 0.5, 1, 0.5, 0])


def test_disc_source():
    f = catalog("ex2_2d").f
    pts = np.array([[0.7, 0.1, 0.1], [0.7, 0.6, 0.0], [0.2, -0.3, -0.3]])
    np.testing.assert_allclose(f(pts), [0.7, 0.0, 0.2])


@pytest.mark.parametrize("pid", PROBLEM_IDS)
def test_initial_meshes(pid):
    pr = catalog(pid)
    m = pr.initial_mesh()
    assert m.space_dim == pr.d
    assert check_admissibility(m).passed
    assert pr.has_exact == (pid in SMOOTH)


def test_unknown_problem():
    with pytest.raises(KeyError):
        catalog("ex9_9d")


def test_eoc_examples():
    halving = [{"ndofs": 4**k, "eta": 2.0**-k} for k in range(4)]
    np.testing.assert_allclose(eoc(halving), [0.5] * 3)
    assert fitted_rate(halving, window=100) == pytest.approx(0.5)
    flat = [{"ndofs": 10 * 2**k, "eta": 3.0} for k in range(3)]
    np.testing.assert_allclose(eoc(flat), [0, 0], atol=1e-15)
    inv = [{"ndofs": n, "eta": 7.0 / n} for n in (10, 30, 200)]
    np.testing.assert_allclose(eoc(inv), [1, 1])


def test_fitted_rate_window():
    # the first point lies outside the window and must not affect the slope
    recs = [{"ndofs": 1, "eta": 1e9}] + [{"ndofs": 10**k, "eta": 10.0**(-k / 3)} for k in (3, 4, 5)]
    assert fitted_rate(recs, window=100) == pytest.approx(1 / 3)


def test_eoc_errors():
    with pytest.raises(ValueError):
        eoc([{"ndofs": 1, "eta": 1.0}])
    with pytest.raises(ValueError):
        eoc([{"ndofs": 1, "eta": 1.0}, {"ndofs": 2, "eta": 0.0}])
    with pytest.raises(ValueError):
        fitted_rate([{"ndofs": 1, "eta": 1.0}, {"ndofs": 2, "eta": None}])
