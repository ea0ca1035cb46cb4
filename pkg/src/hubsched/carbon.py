"""Cap-and-trade settlement accounting and its exact mixed-integer form.

A slot buys emission credits m_c out of the same budget that pays for energy.
Settlement afterwards compares realized emissions against the quota plus the
purchased credits: shortfalls below the covered band earn credit-sale revenue
at the credit price, overshoots pay the penalty price on everything beyond
the covered band.  The piecewise cost is made exactly linear with one binary
indicator per slot plus big-M products, so the day-ahead program stays a
mixed-integer conic problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .conic import Lin, ProblemBuilder


@dataclass(frozen=True)
class CarbonSlot:
    """Carbon market data for one slot."""

    K_c: float
    K_H: float
    quota: float
    C_o2e: float
    C_o2g: float
    p_ie: float
    p_ig: float

    def __post_init__(self):
        if self.K_c <= 0:
            raise ValueError("credit price must be positive")
        if self.K_H < self.K_c:
            raise ValueError("penalty price must not undercut the credit price")
        if self.quota < 0:
            raise ValueError("quota must be nonnegative")
        if self.p_ie <= 0 or self.p_ig <= 0:
            raise ValueError("day-ahead prices must be positive")
        if self.C_o2e < 0 or self.C_o2g < 0:
            raise ValueError("emission intensities must be nonnegative")

    @property
    def emission_coeffs(self):
        """kg of CO2 per cent of electricity and gas budget."""
        return self.C_o2e / self.p_ie, self.C_o2g / self.p_ig


def emissions(m_e, m_g, slot: CarbonSlot):
    """Realized emissions (kg) from the slot's energy purchases."""
    if m_e < 0 or m_g < 0:
        raise ValueError("budget allocations must be nonnegative")
    e_coef, g_coef = slot.emission_coeffs
    return e_coef * m_e + g_coef * m_g


def indicator(m_e, m_g, m_c, slot: CarbonSlot):
    """1 when emissions stay inside the quota-plus-credits band, else 0.

    Ties at the breakpoint resolve to 1; both settlement branches price the
    boundary identically so the choice only affects reporting.
    """
    return int(emissions(m_e, m_g, slot) <= m_c / slot.K_c + slot.quota)


def settlement_cost(m_e, m_g, m_c, slot: CarbonSlot):
    """Settlement term f_c (cents); total carbon outlay per slot is m_c + f_c.

    Inside the covered band the slot sells its surplus credits (the value can
    be negative); beyond it every uncovered kilogram pays the penalty price.
    """
    if m_c < 0:
        raise ValueError("credit budget must be nonnegative")
    e_p = emissions(m_e, m_g, slot)
    if e_p <= m_c / slot.K_c + slot.quota:
        return slot.K_c * (e_p - slot.quota) - m_c
    return slot.K_H * (e_p - slot.quota - m_c / slot.K_c)


def big_m(slot: CarbonSlot, m_e_max, m_g_max, m_c_max):
    """Big-M constant covering both the indicator row and the product boxes.

    Twice the largest possible indicator-row residual keeps the relaxation
    from being artificially tight; the product boxes additionally need M to
    dominate each budget bound so that sigma = z*x stays exact.
    """
    for b in (m_e_max, m_g_max, m_c_max):
        if not math.isfinite(b) or b < 0:
            raise ValueError("finite nonnegative budget bounds are required "
                             "to derive a big-M constant")
    e_coef, g_coef = slot.emission_coeffs
    head = 2.0 * (e_coef * m_e_max + g_coef * m_g_max
                  + m_c_max / slot.K_c + slot.quota)
    return max(head, m_e_max, m_g_max, m_c_max)


@dataclass(frozen=True)
class CarbonLinearization:
    """Variable indices and the linear settlement cost for one slot."""

    z: int
    sigma_me: int
    sigma_mg: int
    sigma_mc: int
    big_M: float
    cost: Lin


def linearize(builder: ProblemBuilder, slot: CarbonSlot, m_e, m_g, m_c,
              m_e_max, m_g_max, m_c_max, tag="") -> CarbonLinearization:
    """Emit the indicator, product boxes, and linear settlement cost.

    ``m_e``, ``m_g``, ``m_c`` are affine expressions (or variable indices)
    in ``builder``.  The returned ``cost`` expression equals
    :func:`settlement_cost` at every feasible integer assignment; the caller
    adds it to the objective.
    """
    M = big_m(slot, m_e_max, m_g_max, m_c_max)
    m_e, m_g, m_c = Lin.of(m_e), Lin.of(m_g), Lin.of(m_c)
    e_coef, g_coef = slot.emission_coeffs
    e_p = m_e * e_coef + m_g * g_coef

    z = builder.add_var(f"z{tag}", binary=True)
    # z = 1 exactly when e_p <= m_c/K_c + quota (up to the M slack)
    builder.add_le(e_p - m_c * (1.0 / slot.K_c) + Lin.term(z, M),
                   M + slot.quota)
    builder.add_le(m_c * (1.0 / slot.K_c) - e_p - Lin.term(z, M),
                   -slot.quota)

    sigmas = []
    for expr, x_max, nm in ((m_e, m_e_max, "me"), (m_g, m_g_max, "mg"),
                            (m_c, m_c_max, "mc")):
        s = builder.add_var(f"sigma_{nm}{tag}", lb=0.0, ub=x_max)
        builder.add_le(Lin.term(s) - Lin.term(z, M), 0.0)
        builder.add_le(Lin.term(s) - expr, 0.0)
        builder.add_le(expr - Lin.term(s) + Lin.term(z, M), M)
        sigmas.append(s)
    sig_e, sig_g, sig_c = sigmas

    ratio = slot.K_H / slot.K_c
    covered = Lin.term(sig_e, e_coef) + Lin.term(sig_g, g_coef) \
        - Lin.term(z, slot.quota)
    cost = covered * (slot.K_c - slot.K_H) + (e_p - slot.quota) * slot.K_H \
        + Lin.term(sig_c, ratio - 1.0) - m_c * ratio
    return CarbonLinearization(z, sig_e, sig_g, sig_c, M, cost)
