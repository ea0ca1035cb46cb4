"""Branch and bound over the binary variables of a conic problem.

Continuous relaxations are all handled by one :class:`SplitSolver` instance,
whose cached KKT factorization does not depend on variable bounds; node
solves only override the bound boxes of the branched binaries.  The search
is best-first on the relaxation bound, branching on the most fractional
binary (ties to the lowest index), with a rounding heuristic at the root to
seed the incumbent.  Everything is deterministic.
"""

from __future__ import annotations

import heapq

import numpy as np

from .problem import ConicProblem, Solution
from .solver import SplitSolver

INF = float("inf")

MAX_BINARIES = 64
_INT_TOL = 1e-6


def _fractional(zvals):
    """Distance of each entry to the nearest integer."""
    return np.abs(zvals - np.round(zvals))


def _usable(sol: Solution, tol):
    """A relaxation whose objective can serve as a node bound."""
    if sol.status == "optimal":
        return True
    if sol.status != "iteration-limit":
        return False
    r = sol.residuals
    return r.get("primal", INF) <= np.sqrt(tol) and r.get("dual", INF) <= np.sqrt(tol)


def solve_mixed(problem: ConicProblem, tol=1e-6, gap=1e-6,
                node_limit=10000) -> Solution:
    """Solve a mixed-binary conic program to the requested absolute gap."""
    problem.validate()
    bidx = problem.binary_indices()
    if bidx.size > MAX_BINARIES:
        raise ValueError(
            f"problem has {bidx.size} binary variables, limit is {MAX_BINARIES}")

    solver = SplitSolver(problem, tol=tol)
    if bidx.size == 0:
        return solver.solve()

    root = solver.solve()
    if root.status in ("infeasible", "unbounded"):
        return root

    incumbent = None
    inc_obj = INF

    def consider(sol: Solution):
        nonlocal incumbent, inc_obj
        if not _usable(sol, tol):
            return
        if np.max(_fractional(sol.x[bidx]), initial=0.0) > _INT_TOL:
            return
        val = sol.objective
        if val < inc_obj:
            x = sol.x.copy()
            x[bidx] = np.round(x[bidx])
            inc_obj = val
            incumbent = Solution(x=x, objective=val, status="optimal",
                                 residuals=dict(sol.residuals),
                                 duals=dict(sol.duals), info=dict(sol.info))

    consider(root)
    if incumbent is None:
        # rounding heuristic: pin every binary to its nearest integer
        fixes = {int(i): (float(r), float(r))
                 for i, r in zip(bidx, np.round(root.x[bidx]))}
        consider(solver.solve(bounds_override=fixes))

    nodes = 0
    counter = 0
    root_bound = root.objective if _usable(root, tol) else -INF
    heap = [(root_bound, 0, {})]
    lower = root_bound
    proven = False

    while heap and nodes < node_limit:
        bound, _, fixes = heapq.heappop(heap)
        lower = bound
        if bound >= inc_obj - gap:
            proven = True
            break
        nodes += 1
        sol = root if not fixes else solver.solve(bounds_override=fixes)
        if sol.status in ("infeasible", "unbounded"):
            # an unbounded restriction would have shown at the root
            continue
        node_bound = sol.objective if _usable(sol, tol) else bound
        if node_bound >= inc_obj - gap:
            continue
        frac = _fractional(sol.x[bidx])
        free = [k for k, i in enumerate(bidx) if int(i) not in fixes]
        if not free or (_usable(sol, tol)
                        and float(np.max(frac[free])) <= _INT_TOL):
            consider(sol)
            continue
        # most fractional first; ties go to the lowest variable index
        k = max(free, key=lambda kk: (frac[kk], -int(bidx[kk])))
        i = int(bidx[k])
        for val in (0.0, 1.0):
            child = dict(fixes)
            child[i] = (val, val)
            counter += 1
            heapq.heappush(heap, (node_bound, counter, child))

    if not heap and not proven:
        # the tree is exhausted, so the incumbent is exact
        proven = True
        lower = inc_obj if incumbent is not None else INF
    elif heap and not proven:
        # stopped on the node limit; remaining nodes carry the tight bound
        lower = heap[0][0]

    if proven:
        status = "optimal" if incumbent is not None else "infeasible"
    else:
        status = "iteration-limit"

    info = {"nodes": nodes, "best_bound": lower,
            "mip_gap": max(0.0, inc_obj - lower) if incumbent is not None else INF}
    if incumbent is None:
        return Solution(x=np.full(problem.n, np.nan), objective=INF,
                        status=status, info=info)
    out = incumbent
    out.status = status
    out.info = dict(out.info)
    out.info.update(info)
    return out
