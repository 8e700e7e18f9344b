"""Adaptive P1 finite elements for box-constrained elliptic optimal control.

The control is treated by variational discretization: it is never stored,
only evaluated as ``clamp(-p_T / alpha, a, b)`` from the discrete adjoint.
"""
from .adapt import AdaptiveHistory, AdaptOptions, afem_loop, doerfler_mark, eoc, tail_eoc
from .control import DiscreteSolution, SolverOptions, solve_ocp
from .estimator import IndicatorSet, total_indicators
from .fem import DataError, SolverError
from .mesh import Mesh, create_unit_square_mesh, refine
from .problems import ProblemSpec, example1, example2, get_problem

__version__ = "0.1.0"

__all__ = [
    "AdaptiveHistory", "AdaptOptions", "afem_loop", "doerfler_mark", "eoc", "tail_eoc",
    "DiscreteSolution", "SolverOptions", "solve_ocp", "IndicatorSet", "total_indicators",
    "DataError", "SolverError", "Mesh", "create_unit_square_mesh", "refine",
    "ProblemSpec", "example1", "example2", "get_problem",
]
