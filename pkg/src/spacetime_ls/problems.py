"""The heat-equation test problems and experimental order of convergence.

All callbacks are vectorized: space-time points are passed as an array of
shape (m, d+1) with time in column 0; ``u0`` receives spatial points (m, d).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import (
    SpaceTimeMesh,
    TimePartition,
    bisect,
    build_tensor_product_mesh,
    cross_mesh,
    lshape_mesh,
    square_mesh,
)

__all__ = ["ProblemSpec", "catalog", "PROBLEM_IDS", "eoc", "fitted_rate"]

PI = np.pi


@dataclass(frozen=True)
class ProblemSpec:
    id: str
    d: int
    mesh_factory: Callable[[], SpaceTimeMesh]
    f: Callable[[np.ndarray], np.ndarray]
    u0: Callable[[np.ndarray], np.ndarray]
    u: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_u: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dt_u: Optional[Callable[[np.ndarray], np.ndarray]] = None
    T: float = 1.0
    description: str = ""
    data_resolution: Optional[float] = None  # composite quadrature scale for rough f

    @property
    def has_exact(self) -> bool:
        return self.u is not None

    def initial_mesh(self) -> SpaceTimeMesh:
        return self.mesh_factory()


def _prerefined_tensor_mesh(spatial_factory, refinements=2):
    def factory():
        m = build_tensor_product_mesh(TimePartition.uniform(1.0, 1), spatial_factory())
        for _ in range(refinements):
            m = bisect(m, np.ones(m.nelements, dtype=bool))
        return m

    return factory


def _zeros(p):
    return np.zeros(len(p))


def _ones(p):
    return np.ones(len(p))


# -- 1+1 dimensions ----------------------------------------------------------


def _ex1_1d():
    def u(p):
        return np.cos(PI * p[:, 0]) * np.sin(PI * p[:, 1])

    def grad_u(p):
        return (PI * np.cos(PI * p[:, 0]) * np.cos(PI * p[:, 1]))[:, None]

    def dt_u(p):
        return -PI * np.sin(PI * p[:, 0]) * np.sin(PI * p[:, 1])

    def f(p):
        t, x = p[:, 0], p[:, 1]
        return (-PI * np.sin(PI * t) + PI**2 * np.cos(PI * t)) * np.sin(PI * x)

    def u0(x):
        return np.sin(PI * x[:, 0])

    return ProblemSpec("ex1_1d", 1, cross_mesh, f, u0, u, grad_u, dt_u,
                       description="smooth solution cos(pi t) sin(pi x)")


def _ex2_1d():
    def u0(x):
        return 1.0 - 2.0 * np.abs(x[:, 0] - 0.5)

    return ProblemSpec("ex2_1d", 1, cross_mesh, _ones, u0,
                       description="f = 1, hat-function initial data")


def _moving_source(p):
    t, x = p[:, 0], p[:, 1]
    on = (t > 0.1) & (t < 0.5) & (x > 0.0) & (x < 1.0)
    strip = (x - 0.1 <= t) & (t <= x - 0.05)
    return np.where(on & strip, 1.0, 0.0)


def _ex3_1d():
    return ProblemSpec("ex3_1d", 1, cross_mesh, _moving_source, _zeros,
                       description="source moving to the right, active for 0.1 < t < 0.5",
                       data_resolution=1 / 128)


def _ex4_1d():
    def f(p):
        return np.full(len(p), 2.0)

    return ProblemSpec("ex4_1d", 1, cross_mesh, f, _ones,
                       description="f = 2, u0 = 1 (incompatible with the boundary condition)")


# -- 2+1 dimensions ----------------------------------------------------------


def _ex1_2d():
    def u(p):
        return np.cos(PI * p[:, 0]) * np.sin(PI * p[:, 1]) * np.sin(PI * p[:, 2])

    def grad_u(p):
        c = PI * np.cos(PI * p[:, 0])
        sx, sy = np.sin(PI * p[:, 1]), np.sin(PI * p[:, 2])
        cx, cy = np.cos(PI * p[:, 1]), np.cos(PI * p[:, 2])
        return np.column_stack([c * cx * sy, c * sx * cy])

    def dt_u(p):
        return -PI * np.sin(PI * p[:, 0]) * np.sin(PI * p[:, 1]) * np.sin(PI * p[:, 2])

    def f(p):
        t = p[:, 0]
        s = np.sin(PI * p[:, 1]) * np.sin(PI * p[:, 2])
        return (-PI * np.sin(PI * t) + 2 * PI**2 * np.cos(PI * t)) * s

    def u0(x):
        return np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1])

    return ProblemSpec("ex1_2d", 2, _prerefined_tensor_mesh(lambda: square_mesh(1)),
                       f, u0, u, grad_u, dt_u,
                       description="smooth solution cos(pi t) sin(pi x) sin(pi y)")


def _ex2_2d():
    def f(p):
        r2 = p[:, 1] ** 2 + p[:, 2] ** 2
        return np.where(r2 < 0.25, p[:, 0], 0.0)

    return ProblemSpec("ex2_2d", 2, _prerefined_tensor_mesh(lshape_mesh), f, _zeros,
                       description="domain with reentrant corner, source t on the disc r < 1/2")


def _ex3_2d():
    return ProblemSpec("ex3_2d", 2, _prerefined_tensor_mesh(lambda: square_mesh(1)),
                       _zeros, _ones, description="f = 0, u0 = 1")


_CATALOG = {
    "ex1_1d": _ex1_1d,
    "ex2_1d": _ex2_1d,
    "ex3_1d": _ex3_1d,
    "ex4_1d": _ex4_1d,
    "ex1_2d": _ex1_2d,
    "ex2_2d": _ex2_2d,
    "ex3_2d": _ex3_2d,
}
PROBLEM_IDS = tuple(_CATALOG)


def catalog(problem_id: str) -> ProblemSpec:
    try:
        return _CATALOG[problem_id]()
    except KeyError:
        raise KeyError(f"unknown problem {problem_id!r}; choose from {', '.join(PROBLEM_IDS)}") from None


def _values(records, quantity):
    q = []
    for r in records:
        v = getattr(r, quantity) if not isinstance(r, dict) else r[quantity]
        q.append(np.nan if v is None else float(v))
    n = [float(r.ndofs if not isinstance(r, dict) else r["ndofs"]) for r in records]
    return np.array(n), np.array(q)


def eoc(records, quantity: str = "eta"):
    """Successive slopes -log(q_{i+1}/q_i) / log(N_{i+1}/N_i)."""
    N, q = _values(records, quantity)
    if len(q) < 2:
        raise ValueError("need at least two records")
    if np.any(~(q > 0)):
        raise ValueError(f"{quantity} must be positive for a rate")
    return list(-np.diff(np.log(q)) / np.diff(np.log(N)))


def fitted_rate(records, quantity: str = "eta", window: float = 10.0) -> float:
    """Least-squares slope of -log q against log N over the last ``window``-fold range of N."""
    N, q = _values(records, quantity)
    sel = N >= N[-1] / window
    if sel.sum() < 2:
        sel[-2:] = True
    if np.any(~(q[sel] > 0)):
        raise ValueError(f"{quantity} must be positive for a rate")
    slope = np.polyfit(np.log(N[sel]), np.log(q[sel]), 1)[0]
    return float(-slope)
