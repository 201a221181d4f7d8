"""Doerfler marking and the solve-estimate-mark-refine loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .assembly import SparseSystem, assemble
from .estimator import ErrorReport, IndicatorField, error_norms, local_indicators
from .fe_space import DiscretePair, build_dof_map, prolong
from .linear_solver import SolverConfig, SolveStats, pcg
from .mesh import SpaceTimeMesh, bisect

__all__ = [
    "LoopConfig",
    "ConvergenceRecord",
    "StepResult",
    "doerfler_mark",
    "iterate",
    "adaptive_loop",
    "uniform_loop",
    "CSV_FIELDS",
]

CSV_FIELDS = ("step", "ndofs", "nelems", "eta", "err_l2", "err_u0", "err_uT",
              "err_flux", "err_dt", "cg_iters", "wall_ms")


@dataclass(frozen=True)
class LoopConfig:
    theta: float = 0.25
    mode: str = "adaptive"
    max_dofs: Optional[int] = None  # defaults to 1e6 (d=1) / 4e5 (d=2)
    max_steps: Optional[int] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    threads: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.mode not in ("adaptive", "uniform"):
            raise ValueError(f"unknown refinement mode {self.mode!r}")

    def dof_limit(self, d: int) -> int:
        if self.max_dofs is not None:
            return self.max_dofs
        return 1_000_000 if d == 1 else 400_000


@dataclass(frozen=True)
class ConvergenceRecord:
    step: int
    ndofs: int
    nelems: int
    eta: float
    err_l2: Optional[float]
    err_u0: Optional[float]
    err_uT: Optional[float]
    err_flux: Optional[float]
    err_dt: Optional[float]
    cg_iters: int
    wall_ms: float
    converged: bool = True
    # quantities for the estimator identity eta^2 = |data|^2 - l(u_h) - x.r
    data_norm2: float = float("nan")
    ell: float = float("nan")
    residual_dot: float = float("nan")
    form_scale: float = float("nan")  # x.|A|x, sets the rounding floor of x.Ax

    @property
    def identity_bound(self) -> float:
        """Admissible |eta^2 - (|data|^2 - l(u_h))|: relative 1e-8, or the
        algebraic residual plus one rounding of the assembled quadratic form."""
        eps = np.finfo(float).eps
        return max(1e-8 * self.eta**2, 2 * abs(self.residual_dot) + eps * self.form_scale)

    @property
    def err_total(self) -> Optional[float]:
        vals = [self.err_l2, self.err_u0, self.err_uT, self.err_flux, self.err_dt]
        vals = [v for v in vals if v is not None]
        return math.sqrt(sum(v * v for v in vals)) if vals else None

    def csv_row(self) -> dict:
        row = asdict(self)
        return {k: ("" if row[k] is None else row[k]) for k in CSV_FIELDS}


@dataclass
class StepResult:
    record: ConvergenceRecord
    mesh: SpaceTimeMesh
    solution: DiscretePair
    indicators: IndicatorField
    errors: ErrorReport
    system: SparseSystem
    stats: SolveStats
    marked: Optional[np.ndarray] = None


def doerfler_mark(indicators, theta: float) -> np.ndarray:
    """Smallest greedy set M with theta * sum(eta^2) <= sum_{K in M} eta(K)^2.

    ``indicators`` are squared values (or an :class:`IndicatorField`).  Elements
    are taken by decreasing indicator, ties by ascending index.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    vals = indicators.values if isinstance(indicators, IndicatorField) else np.asarray(indicators, float)
    total = float(vals.sum())
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(vals)), -vals))
    csum = np.cumsum(vals[order])
    goal = theta * total
    count = int(np.searchsorted(csum, goal * (1 - 1e-14), side="left")) + 1
    count = min(count, len(vals))
    # the full set must satisfy the inequality even when rounding hurts
    while count < len(vals) and csum[count - 1] < goal and vals[order[count]] > 0:
        count += 1
    if theta == 1.0:
        count = int(np.count_nonzero(vals > 0))
    return np.sort(order[:count])


def _abs_form(A, x, block: int = 1 << 16) -> float:
    """x.|A|x by row blocks, avoiding a full copy of |A|."""
    ax = np.abs(x)
    total = 0.0
    for s in range(0, A.shape[0], block):
        rows = A[s:s + block]
        total += float(ax[s:s + block] @ (abs(rows) @ ax))
    return total


def iterate(problem, config: LoopConfig, mesh: SpaceTimeMesh | None = None) -> Iterator[StepResult]:
    """Run the loop, yielding every solved step."""
    mesh = mesh or problem.initial_mesh()
    limit = config.dof_limit(mesh.space_dim)
    guess = None
    step = 0
    while True:
        t0 = time.perf_counter()
        dofmap = build_dof_map(mesh)
        system = assemble(mesh, dofmap, problem, threads=config.threads)
        x0 = None if guess is None else guess.coeffs
        x, stats = pcg(system, config.solver, x0=x0)
        sol = DiscretePair(x, dofmap, mesh)
        ind = local_indicators(mesh, sol, problem)
        errs = error_norms(mesh, sol, problem.u, problem.grad_u, problem.dt_u)
        residual = system.rhs - system.matrix @ x
        wall = (time.perf_counter() - t0) * 1e3
        rec = ConvergenceRecord(
            step=step, ndofs=dofmap.n_total, nelems=mesh.nelements, eta=ind.eta,
            err_l2=errs.err_l2, err_u0=errs.err_u0, err_uT=errs.err_uT,
            err_flux=errs.err_flux, err_dt=errs.err_dt,
            cg_iters=stats.iterations, wall_ms=wall, converged=stats.converged,
            data_norm2=system.data_norm2, ell=float(system.rhs @ x),
            residual_dot=float(x @ residual),
            form_scale=_abs_form(system.matrix, x),
        )
        result = StepResult(rec, mesh, sol, ind, errs, system, stats)
        done = (not stats.converged or dofmap.n_total >= limit
                or (config.max_steps is not None and step + 1 >= config.max_steps))
        if not done:
            if config.mode == "uniform":
                marked = np.arange(mesh.nelements)
            else:
                marked = doerfler_mark(ind, config.theta)
                if len(marked) == 0:
                    done = True
            result.marked = None if done else marked
        yield result
        if done:
            return
        del system
        mesh = bisect(mesh, result.marked)
        guess = prolong(sol, mesh)
        step += 1


def adaptive_loop(problem, config: LoopConfig | None = None):
    config = config or LoopConfig()
    return [r.record for r in iterate(problem, config)]


def uniform_loop(problem, config: LoopConfig | None = None):
    config = config or LoopConfig()
    if config.mode != "uniform":
        config = LoopConfig(theta=config.theta, mode="uniform", max_dofs=config.max_dofs,
                            max_steps=config.max_steps, solver=config.solver, threads=config.threads)
    return [r.record for r in iterate(problem, config)]
