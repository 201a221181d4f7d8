"""Randomized invariant checks shared by the ``check`` subcommand and the tests."""
from __future__ import annotations

import sys
from typing import Callable, TextIO

import numpy as np
import scipy.linalg as sla
from scipy.spatial import Delaunay

from .adaptivity import LoopConfig, iterate
from .assembly import assemble
from .fe_space import build_dof_map
from .linear_solver import SolverConfig, pcg
from .mesh import (
    SpatialMesh,
    TimePartition,
    bisect,
    build_tensor_product_mesh,
    check_admissibility,
)
from .problems import catalog

__all__ = [
    "random_spatial_mesh",
    "random_time_partition",
    "random_spacetime_mesh",
    "random_refined_mesh",
    "run_checks",
]


def random_spatial_mesh(rng: np.random.Generator, d: int, npts: int | None = None) -> SpatialMesh:
    """Random conforming mesh of (0,1)^d; Delaunay for d = 2."""
    if d == 1:
        n = npts or int(rng.integers(2, 8))
        x = np.sort(np.concatenate([[0.0, 1.0], rng.uniform(0.05, 0.95, n - 1)]))
        x = x[np.concatenate([[True], np.diff(x) > 1e-3])]
        return SpatialMesh(x[:, None], np.column_stack([np.arange(len(x) - 1), np.arange(1, len(x))]))
    n = npts or int(rng.integers(3, 12))
    side = np.linspace(0.0, 1.0, 3)
    frame = np.array([(a, b) for a in side for b in side if a in (0, 1) or b in (0, 1)])
    pts = np.vstack([frame, rng.uniform(0.1, 0.9, size=(n, 2))])
    tri = Delaunay(pts).simplices
    # drop slivers from nearly collinear hull points
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    area = 0.5 * np.abs((b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0])
    return SpatialMesh(pts, tri[area > 1e-6])


def random_time_partition(rng: np.random.Generator, nslabs: int | None = None, T: float = 1.0):
    n = nslabs or int(rng.integers(1, 4))
    inner = np.sort(rng.uniform(0.1, 0.9, n - 1)) * T
    return TimePartition(np.concatenate([[0.0], inner, [T]]))


def random_spacetime_mesh(rng: np.random.Generator, d: int, **kw):
    return build_tensor_product_mesh(random_time_partition(rng, **kw), random_spatial_mesh(rng, d))


def random_refined_mesh(rng: np.random.Generator, mesh, rounds: int = 2, fraction: float = 0.2):
    for _ in range(rounds):
        marked = rng.random(mesh.nelements) < fraction
        marked[rng.integers(mesh.nelements)] = True
        mesh = bisect(mesh, marked)
    return mesh


# ----------------------------------------------------------------------------


def _check_tensor(rng, count):
    msgs = []
    for d in (1, 2):
        for _ in range(count):
            m = random_spacetime_mesh(rng, d)
            rep = check_admissibility(m)
            if not rep.passed:
                msgs.append(f"tensor mesh d={d}: {rep.messages}")
    return msgs


def _check_bisect(rng, count):
    msgs = []
    for d in (1, 2):
        for _ in range(count):
            m = random_spacetime_mesh(rng, d)
            vol0 = m.volumes.sum()
            m = random_refined_mesh(rng, m)
            rep = check_admissibility(m)
            if not rep.passed:
                msgs.append(f"refined mesh d={d}: {rep.messages}")
            if abs(m.volumes.sum() - vol0) > 1e-12 * vol0:
                msgs.append(f"refined mesh d={d}: volume drift {m.volumes.sum() - vol0:.3e}")
    return msgs


def _small_systems(rng, count, limit=500):
    out = []
    problems = {1: catalog("ex1_1d"), 2: catalog("ex1_2d")}
    while len(out) < count:
        d = 1 + len(out) % 2
        m = random_spacetime_mesh(rng, d)
        if rng.random() < 0.5:
            m = random_refined_mesh(rng, m, rounds=1)
        dm = build_dof_map(m)
        if dm.n_total > limit or dm.n_total == 0:
            continue
        out.append(assemble(m, dm, problems[d]))
    return out


def _check_spd(rng, count):
    msgs = []
    for s in _small_systems(rng, count):
        A = s.matrix.toarray()
        if np.abs(A - A.T).max() > 1e-12 * np.abs(A).max():
            msgs.append("matrix not symmetric")
        lam = sla.eigvalsh(A)[0]
        if not lam > 0:
            msgs.append(f"smallest eigenvalue {lam:.3e}")
    return msgs


def _check_pcg(rng, count):
    msgs = []
    for s in _small_systems(rng, count):
        x, stats = pcg(s, SolverConfig(max_iter=10 * s.n))
        ref = sla.solve(s.matrix.toarray(), s.rhs, assume_a="pos")
        err = np.linalg.norm(x - ref) / np.linalg.norm(ref)
        if not stats.converged or err > 1e-8:
            msgs.append(f"pcg mismatch {err:.3e} (n={s.n})")
    return msgs


def _check_identity(rng, count):
    msgs = []
    prev = None
    for step in iterate(catalog("ex2_1d"), LoopConfig(max_steps=count + 2)):
        r = step.record
        eta2 = r.eta**2
        gap = abs(eta2 - (r.data_norm2 - r.ell))
        if gap > r.identity_bound:
            msgs.append(f"estimator identity off by {gap:.3e} at step {r.step}")
        if prev is not None and eta2 > prev * (1 + 1e-8):
            msgs.append(f"estimator increased at step {r.step}")
        prev = eta2
    return msgs


CHECKS: dict[str, Callable] = {
    "tensor admissibility": _check_tensor,
    "bisection conformity": _check_bisect,
    "symmetric positive definite": _check_spd,
    "pcg vs dense solve": _check_pcg,
    "estimator identity": _check_identity,
}


def run_checks(seed: int = 0, count: int = 5, out: TextIO = sys.stdout) -> int:
    """Run every suite; prints one line per suite and returns the failure count."""
    rng = np.random.default_rng(seed)
    failures = 0
    for name, fn in CHECKS.items():
        msgs = fn(rng, count)
        status = "ok" if not msgs else "FAIL"
        print(f"{status:4s} {name}", file=out)
        for m in msgs:
            print(f"     {m}", file=out)
        failures += bool(msgs)
    return failures
