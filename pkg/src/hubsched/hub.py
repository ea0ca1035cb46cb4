"""Domain types and constraint builders for the electricity/heat hub.

The hub buys electricity and gas day-ahead out of a per-slot budget, converts
gas through a micro turbine (a dispatch fraction alpha_d) and a gas furnace
(the remaining fraction), moves energy through battery and heat storages, and
serves inelastic plus elastic demand.  The functions here are the shared
vocabulary of every scheduling stage: pure conversions, storage stepping,
and emission of the linear constraint rows that all three timescales reuse.

The dispatch fraction never appears as an optimization variable.  Combining
the heat balance with the budget-to-energy conversion collapses the furnace
and turbine limits into four linear rows over (m_g, D_h_s, H_s); alpha_d is
recovered afterwards from the same balance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .conic import Lin

INF = float("inf")

FEAS_TOL = 1e-6


class StructuralInfeasibility(ValueError):
    """A demand window that cannot be met even at the per-slot caps."""


@dataclass(frozen=True)
class HubParams:
    """Physical and market-interface parameters of the hub."""

    eta_T: float
    eta_M_e: float
    eta_M_h: float
    eta_G: float
    eta_E_ch: float
    eta_E_dis: float
    eta_H_ch: float
    eta_H_dis: float
    E_in_max: float
    E_in_min: float
    G_in_max: float
    G_in_min: float
    E_T_max: float
    G_MT_max: float
    G_GF_max: float
    E_ch_max: float
    E_dis_max: float
    H_ch_max: float
    H_dis_max: float
    S_E_min: float
    S_E_max: float
    S_H_min: float
    S_H_max: float
    S_E_0: float
    S_H_0: float
    C_o2e: float
    C_o2g: float
    quota_per_slot: float
    big_M: float = 1e5

    def __post_init__(self):
        for name in ("eta_T", "eta_M_e", "eta_M_h", "eta_G", "eta_E_ch",
                     "eta_E_dis", "eta_H_ch", "eta_H_dis"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.eta_G <= self.eta_M_h:
            raise ValueError("eta_G must exceed eta_M_h for the dispatch "
                             "elimination to be well posed")
        for lo, hi in (("E_in_min", "E_in_max"), ("G_in_min", "G_in_max"),
                       ("S_E_min", "S_E_max"), ("S_H_min", "S_H_max")):
            if getattr(self, lo) > getattr(self, hi):
                raise ValueError(f"{lo} > {hi}")
        if self.eta_E_ch * self.eta_E_dis >= 1.0 \
                or self.eta_H_ch * self.eta_H_dis >= 1.0:
            raise ValueError("round-trip storage efficiency must be below one")
        if not (self.S_E_min <= self.S_E_0 <= self.S_E_max):
            raise ValueError("S_E_0 outside storage bounds")
        if not (self.S_H_min <= self.S_H_0 <= self.S_H_max):
            raise ValueError("S_H_0 outside storage bounds")

    @property
    def eta_1(self):
        """Electric output forgone per unit of heat shifted to the turbine."""
        return self.eta_M_e / (self.eta_G - self.eta_M_h)

    @staticmethod
    def from_dict(d):
        return HubParams(**{f.name: d[f.name] for f in fields(HubParams)
                            if f.name in d})

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(HubParams)}


@dataclass
class MarketProfiles:
    """Per-slot market data plus the scalar demand/penalty coefficients.

    The six array fields come from the profiles CSV; the remaining scalars
    live in the instance config.  Coefficients that the source publication
    leaves unspecified carry defaults in the bundled instance and are tagged
    as such in its metadata.
    """

    p_ie: np.ndarray
    p_ig: np.ndarray
    K_c: np.ndarray
    K_H: np.ndarray
    D_h_u: np.ndarray
    MN: np.ndarray
    alpha_e: float = -0.08
    beta_e: float = 8.0
    alpha_h: float = -0.08
    beta_h: float = 7.0
    a_s_E: float = 0.010
    a_s_H: float = 0.008
    D_e_s_min: float = 0.0
    D_e_s_max: float = 30.0
    D_h_s_min: float = 0.0
    D_h_s_max: float = 25.0
    D_e_r: float = 15.0
    D_h_r: float = 12.0
    D_e_s_day: float = 200.0
    D_h_s_day: float = 150.0
    C_E_pn: float = 0.5
    C_H_pn: float = 0.5
    C_De_pn: float = 0.5
    C_Dh_pn: float = 0.5

    def __post_init__(self):
        for name in ("p_ie", "p_ig", "K_c", "K_H", "D_h_u", "MN"):
            setattr(self, name, np.asarray(getattr(self, name), float))
        T = self.p_ie.shape[0]
        for name in ("p_ig", "K_c", "K_H", "D_h_u", "MN"):
            if getattr(self, name).shape[0] != T:
                raise ValueError("profile columns must share one horizon")
        if np.any(self.p_ie <= 0) or np.any(self.p_ig <= 0) \
                or np.any(self.K_c <= 0) or np.any(self.K_H <= 0):
            raise ValueError("market prices must be positive")
        if np.any(self.K_H < self.K_c):
            raise ValueError("over-emission penalty must not undercut the "
                             "carbon credit price")
        if self.alpha_e >= 0 or self.alpha_h >= 0:
            raise ValueError("quadratic utility factors must be negative")
        if self.beta_e <= 0 or self.beta_h <= 0:
            raise ValueError("linear utility factors must be positive")

    @property
    def horizon(self):
        return self.p_ie.shape[0]

    def elastic(self, which):
        """(s_min, s_max, ramp, day_total) for demand side 'e' or 'h'."""
        if which == "e":
            return self.D_e_s_min, self.D_e_s_max, self.D_e_r, self.D_e_s_day
        if which == "h":
            return self.D_h_s_min, self.D_h_s_max, self.D_h_r, self.D_h_s_day
        raise ValueError(f"unknown demand side {which!r}")


PROFILES_CSV_HEADER = ["slot", "p_ie", "p_ig", "K_c", "K_H", "D_h_u", "MN"]


def read_profiles_csv(path, **coeffs) -> MarketProfiles:
    cols = {name: {} for name in PROFILES_CSV_HEADER[1:]}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PROFILES_CSV_HEADER:
            raise ValueError(f"unexpected profiles header: {reader.fieldnames}")
        for row in reader:
            k = int(row["slot"])
            for name in cols:
                cols[name][k] = float(row[name])
    T = 1 + max(cols["p_ie"])
    arrays = {}
    for name, vals in cols.items():
        if sorted(vals) != list(range(T)):
            raise ValueError(f"profiles column {name} has missing slots")
        arrays[name] = np.array([vals[k] for k in range(T)])
    return MarketProfiles(**arrays, **coeffs)


def write_profiles_csv(path, profiles: MarketProfiles):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILES_CSV_HEADER)
        for k in range(profiles.horizon):
            w.writerow([k] + [repr(float(getattr(profiles, name)[k]))
                              for name in PROFILES_CSV_HEADER[1:]])


@dataclass(frozen=True)
class StorageState:
    S_E: float
    S_H: float


@dataclass(frozen=True)
class SlotDecisionFirstStage:
    """Budget split for one slot: electricity, gas, carbon credits (cents)."""

    m_e: float
    m_g: float
    m_c: float


@dataclass(frozen=True)
class SlotDecisionSecondStage:
    """Dispatch for one slot; E_s/H_s are net storage flows, charge positive.

    E_T is the real-time transaction with export (selling) counted positive,
    matching the supply-side role it plays in the power balance.
    """

    E_s: float
    H_s: float
    E_s_ch: float
    E_s_dis: float
    H_s_ch: float
    H_s_dis: float
    D_e_s: float
    D_h_s: float
    E_T: float
    alpha_d: float


# ---------------------------------------------------------------------------
# conversions


def convert_energy(params: HubParams, u_e, u_f, u_g, alpha_d, E_s, H_s):
    """Available power and heat after conversion and storage flows."""
    if not 0.0 <= alpha_d <= 1.0:
        raise ValueError(f"alpha_d must lie in [0, 1], got {alpha_d}")
    if u_e < 0 or u_f < 0 or u_g < 0:
        raise ValueError("energy inputs must be nonnegative")
    E_out = params.eta_T * (u_e + u_f) + alpha_d * params.eta_M_e * u_g - E_s
    H_out = (alpha_d * params.eta_M_h + (1.0 - alpha_d) * params.eta_G) * u_g \
        - H_s
    return E_out, H_out


def purchase_from_budget(m_e, m_g, p_ie, p_ig):
    """Budget (cents) to purchased energy (kWh) at day-ahead prices."""
    if p_ie <= 0 or p_ig <= 0:
        raise ValueError("day-ahead prices must be positive")
    if m_e < 0 or m_g < 0:
        raise ValueError("budget allocations must be nonnegative")
    return m_e / p_ie, m_g / p_ig


def step_storage(state: StorageState, ch, dis, which, dt,
                 params: HubParams) -> StorageState:
    """Advance one storage by one slot; raises on rate or state violations."""
    if which == "E":
        cap_ch, cap_dis = params.E_ch_max, params.E_dis_max
        eta_ch, eta_dis = params.eta_E_ch, params.eta_E_dis
        lo, hi, level = params.S_E_min, params.S_E_max, state.S_E
    elif which == "H":
        cap_ch, cap_dis = params.H_ch_max, params.H_dis_max
        eta_ch, eta_dis = params.eta_H_ch, params.eta_H_dis
        lo, hi, level = params.S_H_min, params.S_H_max, state.S_H
    else:
        raise ValueError(f"unknown storage {which!r}")
    if not 0.0 <= ch <= cap_ch + FEAS_TOL:
        raise ValueError(f"charge rate {ch} outside [0, {cap_ch}] for {which}")
    if not 0.0 <= dis <= cap_dis + FEAS_TOL:
        raise ValueError(f"discharge rate {dis} outside [0, {cap_dis}] for {which}")
    new = level + eta_ch * ch * dt - dis * dt / eta_dis
    if new < lo - FEAS_TOL or new > hi + FEAS_TOL:
        raise ValueError(
            f"storage {which} state {new} outside [{lo}, {hi}]")
    if which == "E":
        return replace(state, S_E=new)
    return replace(state, S_H=new)


# ---------------------------------------------------------------------------
# constraint emission


def heat_dispatch_rows(params: HubParams, p_ig, D_h_u, m_g, D_h_s, H_s):
    """The four linear rows that close the heat balance over (m_g, D_h_s, H_s).

    Each returned expression must be <= 0.  Inputs may be numbers or
    :class:`Lin` expressions, so the same function serves numeric validation
    and constraint emission.
    """
    if p_ig <= 0:
        raise ValueError("gas price must be positive")
    theta = Lin.of(D_h_s) + Lin.of(H_s) + float(D_h_u)
    m_g = Lin.of(m_g)
    spread = params.eta_G - params.eta_M_h
    return [
        theta * p_ig - m_g * params.eta_G,
        m_g * params.eta_M_h - theta * p_ig,
        m_g * params.eta_G - theta * p_ig - params.G_MT_max * p_ig * spread,
        theta * p_ig - m_g * params.eta_M_h - params.G_GF_max * p_ig * spread,
    ]


def recover_alpha_d(params: HubParams, p_ig, D_h_u, m_g, D_h_s, H_s,
                    tol=FEAS_TOL):
    """Dispatch fraction implied by the heat balance; 0 when no gas flows."""
    if m_g <= 1e-9:
        return 0.0
    ratio = p_ig * (D_h_u + D_h_s + H_s) / m_g
    alpha = (ratio - params.eta_G) / (params.eta_M_h - params.eta_G)
    if alpha < -tol or alpha > 1.0 + tol:
        raise ValueError(f"recovered dispatch fraction {alpha} outside [0, 1]")
    return float(min(max(alpha, 0.0), 1.0))


def demand_window_rows(d_vars, s_min, s_max, ramp, day_total, dk=1.0,
                       consumed=0.0, prev=None):
    """Box, ramp and daily-minimum rows for an elastic demand window.

    ``d_vars`` are the per-slot demand expressions of the remaining horizon
    (Lin or indices); ``consumed`` reduces the daily minimum by what earlier
    slots already served; ``prev`` anchors the first ramp row at the last
    committed value.  Returns (kind, expr, rhs) triples with kind in
    {"le", "ge"}; raises :class:`StructuralInfeasibility` when the caps
    cannot reach the remaining minimum.
    """
    if not d_vars:
        raise ValueError("demand window must cover at least one slot")
    remaining = day_total - consumed
    if s_max * dk * len(d_vars) < remaining - FEAS_TOL:
        raise StructuralInfeasibility(
            f"remaining daily minimum {remaining} exceeds the window "
            f"capacity {s_max * dk * len(d_vars)}")
    rows = []
    exprs = [Lin.of(d) for d in d_vars]
    total = Lin()
    for e in exprs:
        total = total + e
    rows.append(("ge", total, remaining))
    for e in exprs:
        rows.append(("le", e, s_max * dk))
        rows.append(("ge", e, s_min * dk))
    chain = exprs if prev is None else [Lin.of(prev)] + exprs
    for a, b in zip(chain, chain[1:]):
        rows.append(("le", b - a, ramp * dk))
        rows.append(("ge", b - a, -ramp * dk))
    return rows


# ---------------------------------------------------------------------------
# whole-horizon schedules and validation


@dataclass
class HubSchedule:
    """Hourly schedule over the full horizon, one entry per slot."""

    m_e: np.ndarray
    m_g: np.ndarray
    m_c: np.ndarray
    E_s_ch: np.ndarray
    E_s_dis: np.ndarray
    H_s_ch: np.ndarray
    H_s_dis: np.ndarray
    D_e_s: np.ndarray
    D_h_s: np.ndarray
    E_T: np.ndarray
    dk: float = 1.0

    def __post_init__(self):
        for f in ("m_e", "m_g", "m_c", "E_s_ch", "E_s_dis", "H_s_ch",
                  "H_s_dis", "D_e_s", "D_h_s", "E_T"):
            setattr(self, f, np.asarray(getattr(self, f), float))

    @property
    def horizon(self):
        return self.m_e.shape[0]

    @property
    def E_s(self):
        return (self.E_s_ch - self.E_s_dis) * self.dk

    @property
    def H_s(self):
        return (self.H_s_ch - self.H_s_dis) * self.dk


def storage_series(params: HubParams, ch, dis, which, dk=1.0, start=None):
    """Storage levels after each slot, without bound enforcement."""
    if which == "E":
        eta_ch, eta_dis = params.eta_E_ch, params.eta_E_dis
        s0 = params.S_E_0 if start is None else start
    else:
        eta_ch, eta_dis = params.eta_H_ch, params.eta_H_dis
        s0 = params.S_H_0 if start is None else start
    flows = eta_ch * np.asarray(ch, float) * dk \
        - np.asarray(dis, float) * dk / eta_dis
    return s0 + np.cumsum(flows)


def validate_schedule(schedule: HubSchedule, params: HubParams,
                      profiles: MarketProfiles, tol=FEAS_TOL,
                      terminal=None):
    """Check every hub constraint; returns (slot, constraint_id, residual).

    Horizon-level rows (daily minimum, terminal storage) report slot -1.
    An empty list means the schedule is feasible to the tolerance.
    """
    T = schedule.horizon
    out = []

    def check(slot, cid, residual):
        if residual > tol:
            out.append((slot, cid, float(residual)))

    for k in range(T):
        check(k, "budget_cap",
              schedule.m_e[k] + schedule.m_g[k] + schedule.m_c[k]
              - profiles.MN[k])
        for name in ("m_e", "m_g", "m_c"):
            check(k, f"{name}_nonneg", -getattr(schedule, name)[k])
        check(k, "m_e_max", schedule.m_e[k]
              - profiles.p_ie[k] * params.E_in_max)
        check(k, "m_e_min", profiles.p_ie[k] * params.E_in_min
              - schedule.m_e[k])
        check(k, "m_g_max", schedule.m_g[k]
              - profiles.p_ig[k] * params.G_in_max)
        check(k, "m_g_min", profiles.p_ig[k] * params.G_in_min
              - schedule.m_g[k])
        check(k, "trade_cap", abs(schedule.E_T[k]) - params.E_T_max)
        rows = heat_dispatch_rows(params, profiles.p_ig[k], profiles.D_h_u[k],
                                  schedule.m_g[k], schedule.D_h_s[k],
                                  schedule.H_s[k])
        for j, row in enumerate(rows):
            check(k, f"heat_row_{j}", row.value(np.zeros(0)))
        check(k, "E_ch_rate", schedule.E_s_ch[k] - params.E_ch_max)
        check(k, "E_ch_nonneg", -schedule.E_s_ch[k])
        check(k, "E_dis_rate", schedule.E_s_dis[k] - params.E_dis_max)
        check(k, "E_dis_nonneg", -schedule.E_s_dis[k])
        check(k, "H_ch_rate", schedule.H_s_ch[k] - params.H_ch_max)
        check(k, "H_ch_nonneg", -schedule.H_s_ch[k])
        check(k, "H_dis_rate", schedule.H_s_dis[k] - params.H_dis_max)
        check(k, "H_dis_nonneg", -schedule.H_s_dis[k])
        check(k, "D_e_s_max", schedule.D_e_s[k]
              - profiles.D_e_s_max * schedule.dk)
        check(k, "D_e_s_min", profiles.D_e_s_min * schedule.dk
              - schedule.D_e_s[k])
        check(k, "D_h_s_max", schedule.D_h_s[k]
              - profiles.D_h_s_max * schedule.dk)
        check(k, "D_h_s_min", profiles.D_h_s_min * schedule.dk
              - schedule.D_h_s[k])

    for k in range(T - 1):
        for name, ramp in (("D_e_s", profiles.D_e_r), ("D_h_s", profiles.D_h_r)):
            step = getattr(schedule, name)[k + 1] - getattr(schedule, name)[k]
            check(k, f"{name}_ramp", abs(step) - ramp * schedule.dk)

    s_E = storage_series(params, schedule.E_s_ch, schedule.E_s_dis, "E",
                         schedule.dk)
    s_H = storage_series(params, schedule.H_s_ch, schedule.H_s_dis, "H",
                         schedule.dk)
    for k in range(T):
        check(k, "S_E_max", s_E[k] - params.S_E_max)
        check(k, "S_E_min", params.S_E_min - s_E[k])
        check(k, "S_H_max", s_H[k] - params.S_H_max)
        check(k, "S_H_min", params.S_H_min - s_H[k])

    check(-1, "daily_min_e", profiles.D_e_s_day - float(schedule.D_e_s.sum()))
    check(-1, "daily_min_h", profiles.D_h_s_day - float(schedule.D_h_s.sum()))
    term_E, term_H = (params.S_E_0, params.S_H_0) if terminal is None else terminal
    check(-1, "terminal_E", abs(s_E[-1] - term_E))
    check(-1, "terminal_H", abs(s_H[-1] - term_H))

    # the heat balance itself: the recovered dispatch fraction must exist
    for k in range(T):
        try:
            alpha = recover_alpha_d(params, profiles.p_ig[k],
                                    profiles.D_h_u[k], schedule.m_g[k],
                                    schedule.D_h_s[k], schedule.H_s[k],
                                    tol=max(tol, 1e-5))
        except ValueError:
            check(k, "heat_balance", INF)
            continue
        u_g = schedule.m_g[k] / profiles.p_ig[k]
        _, h_out = convert_energy(params, 0.0, 0.0, u_g, alpha,
                                  0.0, schedule.H_s[k])
        if schedule.m_g[k] > 1e-9:
            check(k, "heat_balance",
                  abs(h_out - profiles.D_h_u[k] - schedule.D_h_s[k]))
    return out
