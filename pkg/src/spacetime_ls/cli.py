"""Command-line driver: convergence runs, interpolation studies, invariant checks."""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

from .adaptivity import CSV_FIELDS, LoopConfig, iterate
from .assembly import dump_matrix
from .linear_solver import PRECONDITIONERS, SolverConfig
from .mesh import dump_mesh
from .problems import PROBLEM_IDS, catalog

__all__ = ["RunConfig", "build_parser", "run", "main"]


@dataclass(frozen=True)
class RunConfig:
    command: str
    problem: Optional[str] = None
    refine: str = "adaptive"
    theta: float = 0.25
    max_dofs: Optional[int] = None
    max_steps: Optional[int] = None
    tol: float = 1e-10
    max_iter: Optional[int] = None
    preconditioner: str = "jacobi"
    out: Optional[str] = None
    dump_mesh: Optional[str] = None
    dump_matrix: Optional[str] = None
    levels: int = 4
    dim: int = 1
    seed: int = 0
    count: int = 5
    threads: Optional[int] = None
    timing: bool = True

    def __post_init__(self):
        if self.problem is not None and self.problem not in PROBLEM_IDS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _theta(s):
    v = float(s)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError("theta must lie in (0, 1]")
    return v


def _tol(s):
    v = float(s)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("tolerance must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spacetime-ls", description="Space-time least-squares FEM for the heat equation")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="assembly threads (default: $STLS_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="run a uniform or adaptive convergence study")
    s.add_argument("--problem", required=True, choices=PROBLEM_IDS)
    s.add_argument("--refine", choices=("uniform", "adaptive"), default="adaptive")
    s.add_argument("--theta", type=_theta, default=0.25)
    s.add_argument("--max-dofs", type=_positive_int, default=None)
    s.add_argument("--max-steps", type=_positive_int, default=None)
    s.add_argument("--tol", type=_tol, default=1e-10, help="relative CG residual tolerance")
    s.add_argument("--max-iter", type=_positive_int, default=None, help="CG iteration cap")
    s.add_argument("--preconditioner", choices=PRECONDITIONERS, default="jacobi",
                   help="lu factorizes the matrix; cheap for 1+1D meshes")
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    s.add_argument("--dump-mesh", default=None, help="write the final mesh with indicators")
    s.add_argument("--dump-matrix", default=None, help="write the final matrix (MatrixMarket)")
    s.add_argument("--no-timing", dest="timing", action="store_false",
                   help="leave wall_ms empty so repeated runs give identical CSV files")
    s.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS)

    i = sub.add_parser("interp-study", help="interpolation error rates on uniform tensor meshes")
    i.add_argument("--dim", type=int, choices=(1, 2), default=1)
    i.add_argument("--levels", type=_positive_int, default=4)
    i.add_argument("--out", default=None)

    c = sub.add_parser("check", help="run randomized invariant checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--count", type=_positive_int, default=5)
    return p


def _open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _config(args) -> RunConfig:
    keys = RunConfig.__dataclass_fields__
    values = vars(args)
    return RunConfig(**{k: v for k, v in values.items() if k in keys})


def _solve(args: RunConfig) -> int:
    config = LoopConfig(
        theta=args.theta,
        mode=args.refine,
        max_dofs=args.max_dofs,
        max_steps=args.max_steps,
        solver=SolverConfig(rtol=args.tol, max_iter=args.max_iter,
                            preconditioner=args.preconditioner),
        threads=args.threads,
    )
    problem = catalog(args.problem)
    fh, close = _open_out(args.out)
    last = None
    try:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        fh.flush()
        for step in iterate(problem, config):
            row = step.record.csv_row()
            row["wall_ms"] = f"{row['wall_ms']:.1f}" if args.timing else ""
            writer.writerow(row)
            fh.flush()
            last = step
    finally:
        if close:
            fh.close()
    if last is None:
        return 1
    if args.dump_mesh:
        dump_mesh(last.mesh, args.dump_mesh, indicators=last.indicators.values)
    if args.dump_matrix:
        dump_matrix(last.system, args.dump_matrix)
    if not last.stats.converged:
        print(f"solver did not converge at step {last.record.step} "
              f"(relative residual {last.stats.residual:.3e})", file=sys.stderr)
        return 1
    return 0


def _interp(args: RunConfig) -> int:
    from .interp_verify import RATE_QUANTITIES, interp_rate_study

    problem = catalog("ex1_1d" if args.dim == 1 else "ex1_2d")
    rows = interp_rate_study(problem.u, problem.grad_u, problem.dt_u, d=args.dim, levels=args.levels)
    fields = ["level", "h", "ndofs", *RATE_QUANTITIES, *(f"rate_{q}" for q in RATE_QUANTITIES)]
    fh, close = _open_out(args.out)
    try:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", restval="")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if close:
            fh.close()
    return 0


def _check(args: RunConfig) -> int:
    from .checks import run_checks

    failures = run_checks(seed=args.seed, count=args.count, out=sys.stdout)
    return 1 if failures else 0


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is None:
        env = os.environ.get("STLS_THREADS")
        if env:
            try:
                args.threads = _positive_int(env)
            except (ValueError, argparse.ArgumentTypeError):
                print(f"invalid STLS_THREADS value {env!r}", file=sys.stderr)
                return 2
    args = _config(args)
    if args.command == "solve":
        return _solve(args)
    if args.command == "interp-study":
        return _interp(args)
    return _check(args)


def main() -> None:
    try:
        code = run()
        sys.stdout.flush()
    except BrokenPipeError:
        # output piped into e.g. head: silence the flush at interpreter exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        code = 1
    sys.exit(code)
