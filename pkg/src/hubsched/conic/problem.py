"""Problem container for linearly constrained optimization over boxes and
second-order cones, with an optional diagonal quadratic objective and binary
variables.

A :class:`ConicProblem` stores everything in plain numpy/scipy structures:

* per-variable bounds, binary flags, linear cost and diagonal quadratic cost,
* sparse equality rows ``A_eq x = b_eq`` and inequality rows ``A_ub x <= b_ub``,
* second-order cones ``x[t] >= ||x[rest]||`` and rotated cones
  ``2 x[u] x[v] >= ||x[rest]||^2`` given as index tuples into the variable
  vector.

Cones reference variables directly, so the :class:`ProblemBuilder` lowers
cone membership of affine expressions into dedicated slack variables plus
equality rows.  That keeps every variable in at most one cone and keeps the
projection step of the solver a product of simple projections.

The objective convention is ``c @ x + sum_j q_j * x_j**2`` (no 1/2 factor).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

INF = float("inf")


class Lin:
    """Sparse affine expression: sum of coeff * var plus a constant."""

    __slots__ = ("coeffs", "const")

    def __init__(self, coeffs=None, const=0.0):
        self.coeffs = dict(coeffs) if coeffs else {}
        self.const = float(const)

    @staticmethod
    def term(index, coeff=1.0):
        return Lin({int(index): float(coeff)})

    @staticmethod
    def of(value):
        """Coerce an int (variable index), float, or Lin into a Lin."""
        if isinstance(value, Lin):
            return value
        if isinstance(value, (int, np.integer)):
            return Lin.term(int(value))
        return Lin(const=float(value))

    def copy(self):
        return Lin(self.coeffs, self.const)

    def __add__(self, other):
        other = Lin.of(other)
        out = self.copy()
        for i, c in other.coeffs.items():
            out.coeffs[i] = out.coeffs.get(i, 0.0) + c
        out.const += other.const
        return out

    __radd__ = __add__

    def __neg__(self):
        return Lin({i: -c for i, c in self.coeffs.items()}, -self.const)

    def __sub__(self, other):
        return self + (-Lin.of(other))

    def __rsub__(self, other):
        return Lin.of(other) + (-self)

    def __mul__(self, scalar):
        s = float(scalar)
        return Lin({i: c * s for i, c in self.coeffs.items()}, self.const * s)

    __rmul__ = __mul__

    def value(self, x):
        return self.const + sum(c * x[i] for i, c in self.coeffs.items())


@dataclass
class Solution:
    """Result of a solve.

    ``status`` is one of ``optimal``, ``infeasible``, ``unbounded`` or
    ``iteration-limit``.  ``residuals`` holds (primal, dual, gap) measured on
    the problem as given; ``optimal`` is only reported when all three are
    within the configured tolerance.  ``duals`` carries equality, inequality,
    bound and cone multipliers when the solve produced them.
    """

    x: np.ndarray
    objective: float
    status: str
    residuals: dict = field(default_factory=dict)
    duals: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == "optimal"


class ConicProblem:
    def __init__(self, names, lb, ub, binary, c, q, A_eq, b_eq, A_ub, b_ub,
                 socs, rsocs):
        self.names = list(names)
        self.n = len(self.names)
        self.lb = np.asarray(lb, dtype=float)
        self.ub = np.asarray(ub, dtype=float)
        self.binary = np.asarray(binary, dtype=bool)
        self.c = np.asarray(c, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.A_eq = sp.csr_matrix(A_eq) if A_eq is not None else sp.csr_matrix((0, self.n))
        self.b_eq = np.asarray(b_eq, dtype=float)
        self.A_ub = sp.csr_matrix(A_ub) if A_ub is not None else sp.csr_matrix((0, self.n))
        self.b_ub = np.asarray(b_ub, dtype=float)
        self.socs = [np.asarray(s, dtype=int) for s in socs]
        self.rsocs = [np.asarray(s, dtype=int) for s in rsocs]

    # -- basic queries ----------------------------------------------------

    @property
    def num_binaries(self):
        return int(self.binary.sum())

    def binary_indices(self):
        return np.flatnonzero(self.binary)

    def objective_value(self, x):
        x = np.asarray(x, dtype=float)
        return float(self.c @ x + self.q @ (x * x))

    def cone_members(self):
        """All variable indices that appear in some cone."""
        out = []
        for s in self.socs:
            out.extend(s.tolist())
        for s in self.rsocs:
            out.extend(s.tolist())
        return out

    def validate(self):
        """Raise ValueError on structural defects."""
        n = self.n
        for arr, name in ((self.lb, "lb"), (self.ub, "ub"), (self.c, "c"),
                          (self.q, "q")):
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
        if np.any(self.q < 0):
            raise ValueError("quadratic objective must be diagonal PSD (q >= 0)")
        if np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"empty bound interval on variable {self.names[bad]}")
        for i in np.flatnonzero(self.binary):
            if not (self.lb[i] >= 0.0 and self.ub[i] <= 1.0):
                raise ValueError(
                    f"binary variable {self.names[i]} must have bounds within [0, 1]")
        if self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise ValueError("A_eq/b_eq row mismatch")
        if self.A_ub.shape[0] != self.b_ub.shape[0]:
            raise ValueError("A_ub/b_ub row mismatch")
        if self.A_eq.shape[1] != n or self.A_ub.shape[1] != n:
            raise ValueError("constraint matrix column count mismatch")
        seen = set()
        for kind, cones, minlen in (("soc", self.socs, 2), ("rsoc", self.rsocs, 3)):
            for s in cones:
                if len(s) < minlen:
                    raise ValueError(f"{kind} cone too short: {s}")
                for i in s.tolist():
                    if not (0 <= i < n):
                        raise ValueError(f"{kind} cone references invalid variable {i}")
                    if i in seen:
                        raise ValueError(
                            f"variable {self.names[i]} appears in more than one cone")
                    seen.add(i)
                    if np.isfinite(self.lb[i]) or np.isfinite(self.ub[i]):
                        raise ValueError(
                            f"cone variable {self.names[i]} must be free of box bounds")
                    if self.binary[i]:
                        raise ValueError(f"cone variable {self.names[i]} cannot be binary")
        return True

    # -- plain-text serialization -----------------------------------------

    def dumps(self):
        """Serialize to the documented plain-text format (round-trip exact)."""
        out = io.StringIO()
        w = out.write
        w("conicproblem 1\n")
        w(f"vars {self.n}\n")
        for i in range(self.n):
            w(f"{self.names[i]} {float(self.lb[i])!r} {float(self.ub[i])!r} "
              f"{int(self.binary[i])} {float(self.c[i])!r} {float(self.q[i])!r}\n")

        def write_rows(tag, A, b):
            A = A.tocsr()
            w(f"{tag} {A.shape[0]}\n")
            for r in range(A.shape[0]):
                lo, hi = A.indptr[r], A.indptr[r + 1]
                terms = " ".join(f"{j}:{float(v)!r}" for j, v in
                                 zip(A.indices[lo:hi], A.data[lo:hi]))
                w(f"{float(b[r])!r} {terms}".rstrip() + "\n")

        write_rows("eq", self.A_eq, self.b_eq)
        write_rows("le", self.A_ub, self.b_ub)
        w(f"soc {len(self.socs)}\n")
        for s in self.socs:
            w(" ".join(str(i) for i in s.tolist()) + "\n")
        w(f"rsoc {len(self.rsocs)}\n")
        for s in self.rsocs:
            w(" ".join(str(i) for i in s.tolist()) + "\n")
        return out.getvalue()

    @staticmethod
    def loads(text):
        lines = text.strip().splitlines()
        pos = 0

        def next_line():
            nonlocal pos
            line = lines[pos]
            pos += 1
            return line

        header = next_line().split()
        if header[0] != "conicproblem":
            raise ValueError("not a conic problem dump")
        n = int(next_line().split()[1])
        names, lb, ub, binary, c, q = [], [], [], [], [], []
        for _ in range(n):
            parts = next_line().split()
            names.append(parts[0])
            lb.append(float(parts[1]))
            ub.append(float(parts[2]))
            binary.append(bool(int(parts[3])))
            c.append(float(parts[4]))
            q.append(float(parts[5]))

        def read_rows():
            m = int(next_line().split()[1])
            rows, cols, vals, rhs = [], [], [], []
            for r in range(m):
                parts = next_line().split()
                rhs.append(float(parts[0]))
                for t in parts[1:]:
                    j, v = t.split(":")
                    rows.append(r)
                    cols.append(int(j))
                    vals.append(float(v))
            A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
            return A, np.asarray(rhs, dtype=float)

        A_eq, b_eq = read_rows()
        A_ub, b_ub = read_rows()
        socs = []
        for _ in range(int(next_line().split()[1])):
            socs.append([int(t) for t in next_line().split()])
        rsocs = []
        for _ in range(int(next_line().split()[1])):
            rsocs.append([int(t) for t in next_line().split()])
        return ConicProblem(names, lb, ub, binary, c, q, A_eq, b_eq, A_ub,
                            b_ub, socs, rsocs)


class ProblemBuilder:
    """Incremental construction of a :class:`ConicProblem`.

    Rows accept :class:`Lin` expressions (or bare variable indices); cone
    helpers accept affine expressions and lower them to slack variables so the
    final problem satisfies the cone-disjointness invariant.
    """

    def __init__(self):
        self.names = []
        self.lb = []
        self.ub = []
        self.binary = []
        self.c = []
        self.q = []
        self._eq = []      # (coeff dict, rhs)
        self._ub_rows = []
        self.socs = []
        self.rsocs = []

    @property
    def num_vars(self):
        return len(self.names)

    def add_var(self, name, lb=-INF, ub=INF, binary=False, obj=0.0, quad=0.0):
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.binary.append(bool(binary))
        self.c.append(float(obj))
        self.q.append(float(quad))
        return len(self.names) - 1

    def add_obj(self, expr, coeff=1.0):
        expr = Lin.of(expr)
        for i, cc in expr.coeffs.items():
            self.c[i] += coeff * cc
        return expr.const * coeff

    def add_eq(self, expr, rhs=0.0):
        expr = Lin.of(expr)
        self._eq.append((dict(expr.coeffs), float(rhs) - expr.const))

    def add_le(self, expr, rhs=0.0):
        """expr <= rhs."""
        expr = Lin.of(expr)
        self._ub_rows.append((dict(expr.coeffs), float(rhs) - expr.const))

    def add_ge(self, expr, rhs=0.0):
        self.add_le(-Lin.of(expr), -float(rhs))

    def add_range(self, expr, lo, hi):
        self.add_le(expr, hi)
        self.add_ge(expr, lo)

    def _slack_for(self, expr, name):
        expr = Lin.of(expr)
        s = self.add_var(name)
        self.add_eq(Lin.term(s) - expr, 0.0)
        return s

    def add_soc(self, exprs, tag="soc"):
        """Membership exprs[0] >= || exprs[1:] ||, all affine."""
        k = len(self.socs) + len(self.rsocs)
        idx = [self._slack_for(e, f"_{tag}{k}_{j}") for j, e in enumerate(exprs)]
        self.socs.append(idx)
        return idx

    def add_rsoc(self, u, v, vec, tag="rsoc"):
        """Membership 2*u*v >= ||vec||^2 with u, v >= 0, all affine."""
        k = len(self.socs) + len(self.rsocs)
        idx = [self._slack_for(u, f"_{tag}{k}_u"),
               self._slack_for(v, f"_{tag}{k}_v")]
        idx += [self._slack_for(e, f"_{tag}{k}_{j}") for j, e in enumerate(vec)]
        self.rsocs.append(idx)
        return idx

    def add_quad_le(self, weights, exprs, bound, tag="quad"):
        """sum_j weights[j] * exprs[j]^2 <= bound (affine bound), via one SOC.

        Uses the identity  sum w_j e_j^2 <= b  <=>
        ||(2*sqrt(w) e, b - 1)|| <= b + 1.
        """
        terms = [Lin.of(bound) + 1.0]
        for wgt, e in zip(weights, exprs):
            if wgt < 0:
                raise ValueError("quadratic weights must be nonnegative")
            terms.append(Lin.of(e) * (2.0 * float(np.sqrt(wgt))))
        terms.append(Lin.of(bound) - 1.0)
        return self.add_soc(terms, tag=tag)

    def _rows_to_csr(self, rows):
        ri, ci, vals, rhs = [], [], [], []
        for r, (coeffs, b) in enumerate(rows):
            rhs.append(b)
            for j, v in coeffs.items():
                if v != 0.0:
                    ri.append(r)
                    ci.append(j)
                    vals.append(v)
        A = sp.csr_matrix((vals, (ri, ci)), shape=(len(rows), self.num_vars))
        return A, np.asarray(rhs, dtype=float)

    def build(self):
        A_eq, b_eq = self._rows_to_csr(self._eq)
        A_ub, b_ub = self._rows_to_csr(self._ub_rows)
        prob = ConicProblem(self.names, self.lb, self.ub, self.binary, self.c,
                            self.q, A_eq, b_eq, A_ub, b_ub, self.socs,
                            self.rsocs)
        prob.validate()
        return prob
