"""Space-time least-squares finite elements for the heat equation.

P1 approximations of the solution u and its flux sigma = grad_x u on simplicial
meshes of the space-time cylinder, with a built-in a posteriori estimator,
Doerfler marking and newest-vertex bisection.
"""
from .adaptivity import ConvergenceRecord, LoopConfig, adaptive_loop, doerfler_mark, iterate, uniform_loop
from .assembly import SparseSystem, assemble
from .estimator import ErrorReport, IndicatorField, error_norms, local_indicators
from .fe_space import DiscretePair, DofMap, build_dof_map
from .linear_solver import SolverConfig, SolveStats, pcg
from .mesh import SpaceTimeMesh, bisect, build_tensor_product_mesh, check_admissibility
from .problems import PROBLEM_IDS, ProblemSpec, catalog, eoc, fitted_rate

__version__ = "0.1.0"

__all__ = [
    "ConvergenceRecord",
    "LoopConfig",
    "adaptive_loop",
    "doerfler_mark",
    "iterate",
    "uniform_loop",
    "SparseSystem",
    "assemble",
    "ErrorReport",
    "IndicatorField",
    "error_norms",
    "local_indicators",
    "DiscretePair",
    "DofMap",
    "build_dof_map",
    "SolverConfig",
    "SolveStats",
    "pcg",
    "SpaceTimeMesh",
    "bisect",
    "build_tensor_product_mesh",
    "check_admissibility",
    "PROBLEM_IDS",
    "ProblemSpec",
    "catalog",
    "eoc",
    "fitted_rate",
]
