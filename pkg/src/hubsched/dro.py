"""Distributionally robust building blocks for the day-ahead program.

Two pieces of the day-ahead model depend on moment ambiguity sets:

* the worst-case expectation of the real-time settlement term
  Phi = f_s - f_d - xi * E_T over price distributions, replaced by its exact
  conic dual: per slot, minimize r + y subject to a 2x2 PSD condition tying
  (Q, w, E_T, r - f_s + f_d) together and an epigraph on y over the mean
  ellipsoid.  The PSD condition lowers to one rotated second-order cone.
* the joint renewable/elastic-load chance constraint, replaced by its
  deterministic counterpart: the nominal power balance at the mean plus a
  fixed safety margin l * sqrt(phi' Sigma phi).

Both reformulations are exact, so tests compare them against closed-form
worst cases rather than sampled bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conic import Lin, ProblemBuilder
from .uncertainty import AmbiguitySet

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# chance-constraint counterpart


def cc_threshold(gamma1, gamma2, epsilon):
    """Safety multiplier of the distributionally robust chance constraint.

    Continuous across the branch boundary gamma1/gamma2 = epsilon: there the
    first branch collapses to sqrt(gamma2/epsilon) algebraically.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie strictly between 0 and 1")
    if gamma1 < 0:
        raise ValueError("gamma1 must be nonnegative")
    if gamma2 < max(gamma1, 1.0):
        raise ValueError("gamma2 must be at least max(gamma1, 1)")
    if gamma1 <= epsilon * gamma2:
        return math.sqrt(gamma1) \
            + math.sqrt((1.0 - epsilon) * (gamma2 - gamma1) / epsilon)
    return math.sqrt(gamma2 / epsilon)


def cc_margin(eta_T, aset: AmbiguitySet, epsilon):
    """Constant worst-case load margin phi'u + l*sqrt(phi' Sigma phi).

    phi = [-eta_T, 1] weights the renewable output against the inelastic
    power demand, the two coordinates of the ambiguity set.
    """
    if aset.moments.dim != 2:
        raise ValueError("the chance constraint couples exactly two "
                         "uncertain quantities")
    phi = np.array([-eta_T, 1.0])
    sig = float(phi @ aset.moments.second @ phi)
    l = cc_threshold(aset.gamma1, aset.gamma2, epsilon)
    return float(phi @ aset.moments.mean) + l * math.sqrt(max(sig, 0.0))


def balance_terms(params, p_ie, p_ig, D_h_u, decisions):
    """Decision-dependent part of the power balance, supply counted negative.

    ``decisions`` maps m_e, m_g, D_e_s, D_h_s, E_s, H_s, E_T to affine
    expressions or numbers.  Adding the realized (or worst-case) load terms
    to the result gives the complete row, which must stay <= 0.
    """
    d = {k: Lin.of(v) for k, v in decisions.items()}
    eta1 = params.eta_1
    expr = d["D_e_s"] + d["E_T"] + d["E_s"] \
        - d["m_e"] * (params.eta_T / p_ie) \
        - d["m_g"] * (eta1 * params.eta_G / p_ig) \
        + (d["H_s"] + d["D_h_s"]) * eta1
    return expr + eta1 * float(D_h_u)


def cc_row(params, p_ie, p_ig, D_h_u, decisions, aset: AmbiguitySet,
           epsilon):
    """Deterministic counterpart of the power-balance chance constraint.

    Returns a Lin that must be <= 0; the uncertainty enters only through
    the constant margin, so the row stays linear.
    """
    return balance_terms(params, p_ie, p_ig, D_h_u, decisions) \
        + cc_margin(params.eta_T, aset, epsilon)


# ---------------------------------------------------------------------------
# 2x2 PSD certificates


def psd2x2_member(Q, a, rho, tol=0.0):
    """Is [[Q, a], [a, rho]] positive semidefinite?"""
    return Q >= -tol and rho >= -tol and Q * rho >= a * a - tol


def add_psd2x2(builder: ProblemBuilder, Q, a, rho, tag="psd"):
    """Emit [[Q, a], [a, rho]] >= 0 as one rotated cone: 2*(Q)(rho) >= 2a^2."""
    return builder.add_rsoc(Lin.of(Q), Lin.of(rho), [Lin.of(a) * SQRT2],
                            tag=tag)


# ---------------------------------------------------------------------------
# worst-case expectation dual


@dataclass(frozen=True)
class DualBlock:
    """Variable indices of one slot's inner dual, plus its objective r + y."""

    r: int
    Q: int
    w: int
    y: int
    objective: Lin


def dual_inner_block(builder: ProblemBuilder, E_T, fsd, aset: AmbiguitySet,
                     tag="") -> DualBlock:
    """Emit the exact dual of max E[f_s - f_d - xi*E_T] over the price set.

    ``E_T`` is the slot's traded energy (affine, sale positive) and ``fsd``
    an affine handle on f_s - f_d (an epigraph variable when those costs are
    quadratic).  The block contributes ``r + y`` to a minimization objective;
    at the optimum that equals the worst-case expectation exactly.

    A configured ambiguity support must be a half line [lo, inf); the dual
    then only enforces nonnegativity of the price quadratic on that interval,
    which is what keeps sub-support prices from inflating the worst case.
    """
    if aset.moments.dim != 1:
        raise ValueError("the traded-price ambiguity set is scalar")
    u = aset.moments.scalar_mean
    var = aset.moments.scalar_var
    E_T = Lin.of(E_T)
    fsd = Lin.of(fsd)

    r = builder.add_var(f"r{tag}")
    Q = builder.add_var(f"Q{tag}", lb=0.0)
    w = builder.add_var(f"w{tag}")
    y = builder.add_var(f"y{tag}")

    # epigraph of the mean-ellipsoid support function (two signs of |.|)
    spread = math.sqrt(aset.gamma1 * max(var, 0.0))
    base = Lin.term(Q, aset.gamma2 * var + u * u) + Lin.term(w, u)
    arm = Lin.term(w) + Lin.term(Q, 2.0 * u)
    builder.add_le(base + arm * spread - Lin.term(y), 0.0)
    builder.add_le(base - arm * spread - Lin.term(y), 0.0)

    # the price quadratic Q*xi^2 + (w + E_T)*xi + (r - fsd) stays nonnegative
    rho = Lin.term(r) - fsd
    b = Lin.term(w) + E_T
    if aset.support is None:
        add_psd2x2(builder, Lin.term(Q), b * 0.5, rho, tag=f"dual{tag}")
    else:
        lo, hi = aset.support
        lo = float(np.asarray(lo).reshape(-1)[0])
        if np.isfinite(np.asarray(hi, dtype=float)).any():
            raise ValueError("price support must be a half line [lo, inf)")
        rho_lo = Lin.term(Q, lo * lo) + b * lo + rho
        b_lo = b + Lin.term(Q, 2.0 * lo)
        g = builder.add_var(f"g{tag}", lb=0.0)
        builder.add_ge(rho_lo, 0.0)
        builder.add_ge(b_lo + Lin.term(g, 2.0), 0.0)
        builder.add_rsoc(Lin.term(Q), rho_lo, [Lin.term(g, SQRT2)],
                         tag=f"dual{tag}")

    return DualBlock(r, Q, w, y, Lin.term(r) + Lin.term(y))


def solve_worst_case(E_T, fsd, aset: AmbiguitySet, tol=1e-8):
    """Optimize a single dual block on its own; returns the worst-case value.

    Standalone wrapper used by tests and by cost attribution; the day-ahead
    program embeds the same rows via :func:`dual_inner_block`.
    """
    from .conic import solve_continuous

    builder = ProblemBuilder()
    block = dual_inner_block(builder, float(E_T), float(fsd), aset)
    const = builder.add_obj(block.objective)
    sol = solve_continuous(builder.build(), tol=tol)
    if not sol.ok:
        raise RuntimeError(f"worst-case dual did not solve: {sol.status}")
    return sol.objective + const
