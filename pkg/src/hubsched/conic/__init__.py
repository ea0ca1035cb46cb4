"""Mixed-binary second-order-cone programming toolkit.

Modeling lives in :mod:`hubsched.conic.problem` (expressions, builder,
serialization), continuous solves in :mod:`hubsched.conic.solver` and the
binary search in :mod:`hubsched.conic.bnb`.
"""

from .problem import INF, ConicProblem, Lin, ProblemBuilder, Solution
from .solver import (SplitSolver, kkt_residuals, project_box, project_rsoc,
                     project_soc, rsoc_violation, soc_violation,
                     solve_continuous)
from .bnb import solve_mixed

__all__ = [
    "INF",
    "ConicProblem",
    "Lin",
    "ProblemBuilder",
    "Solution",
    "SplitSolver",
    "kkt_residuals",
    "project_box",
    "project_soc",
    "project_rsoc",
    "soc_violation",
    "rsoc_violation",
    "solve_continuous",
    "solve_mixed",
]
