"""Three-level scheduling: robust day-ahead commitment, hourly re-dispatch,
quarter-hour tracking.

The day-ahead stage buys energy and emission credits against moment ambiguity
sets (worst-case expected settlement plus a chance-constrained power balance)
and fixes the purchase budgets for the whole day.  Every hour the hour-ahead
stage re-solves the remainder of the day with shrunken forecast sets, the
realized trade price of the next slot, and the storage/demand state fed back
from execution; it commits the trade and heat-side decisions of that slot.
Every quarter hour the intra-hour stage tracks the hourly plan against the
realized renewable output and inelastic demand with a tiny QP whose only
freedom is electric storage, elastic electric demand, and a priced imbalance
slack.

Costs are booked once per level from the same primitive formulas that the
optimizers minimize, so ledger totals can be audited against the recorded
physical quantities exactly.  All quarter-level quadratic costs weight squared
rates by duration; that convention makes a quarter split of an hourly plan
cost exactly as much as the plan itself, which is what ties the levels
together in the degenerate case of certainty.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .carbon import CarbonSlot, linearize, settlement_cost
from .conic import Lin, ProblemBuilder, solve_continuous, solve_mixed
from .dro import balance_terms, cc_row, dual_inner_block
from .hub import (StorageState, StructuralInfeasibility, HubSchedule,
                  demand_window_rows, heat_dispatch_rows, recover_alpha_d,
                  step_storage)
from .instance import Instance
from .uncertainty import ScenarioTrace

DK = 1.0           # hourly slot length
DM = 0.25          # quarter-hour slot length
QUARTERS = 4

MODES = ("M1", "M2", "M3", "M4")

LEDGER_CSV_HEADER = [
    "quarter", "u_f", "D_e_u", "p_c", "D_e_s", "E_s_ch", "E_s_dis", "S_E",
    "H_s", "D_h_s", "E_T", "cost_storage", "cost_utility", "cost_penalty",
    "cost_market", "cost_slack", "cost_total",
]


class SolverFailure(RuntimeError):
    """A level's optimizer did not reach the requested status."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class RollingError(RuntimeError):
    """Rolling execution aborted; carries the partial ledger for forensics."""

    def __init__(self, message, level, tau, quarter=None, ledger=None):
        super().__init__(message)
        self.level = level
        self.tau = tau
        self.quarter = quarter
        self.ledger = ledger


# ---------------------------------------------------------------------------
# cost primitives shared by optimization, booking, and audit


def storage_wear_cost(a, net, dt=1.0):
    """Degradation cost of one slot's net storage throughput."""
    return a * (net / dt) ** 2 * dt


def demand_utility(alpha, beta, served, dt=1.0):
    """Consumer utility of elastic demand served over one slot."""
    rate = served / dt
    return (alpha * rate * rate + beta * rate) * dt


def tracking_penalty(c, actual, plan_rate, dt=1.0):
    """Re-dispatch penalty for deviating from the upstream plan rate."""
    gap = actual / dt - plan_rate
    return c * gap * gap * dt


# ---------------------------------------------------------------------------
# shared constraint emission


def _carbon_slot(params, profiles, k):
    return CarbonSlot(K_c=float(profiles.K_c[k]), K_H=float(profiles.K_H[k]),
                      quota=params.quota_per_slot, C_o2e=params.C_o2e,
                      C_o2g=params.C_o2g, p_ie=float(profiles.p_ie[k]),
                      p_ig=float(profiles.p_ig[k]))


def _emit_operation_block(b, params, profiles, slots, dk=DK, start=None,
                          terminal_e=True, terminal_h=True,
                          prev_e=None, prev_h=None,
                          consumed_e=0.0, consumed_h=0.0):
    """Storage, elastic-demand and trade variables shared by every level.

    Returns a dict of per-name {slot: index} maps.  Storage dynamics start
    from ``start`` and, when requested, return to the configured initial
    state at the end of the covered window; elastic-demand windows subtract
    what earlier slots already ``consumed`` and anchor their first ramp at
    ``prev``.
    """
    slots = list(slots)
    if start is None:
        start = StorageState(params.S_E_0, params.S_H_0)
    names = ("E_ch", "E_dis", "H_ch", "H_dis", "S_E", "S_H", "E_s", "H_s",
             "D_e_s", "D_h_s", "E_T")
    v = {name: {} for name in names}

    carriers = (
        ("E", params.E_ch_max, params.E_dis_max, params.eta_E_ch,
         params.eta_E_dis, params.S_E_min, params.S_E_max, start.S_E,
         params.S_E_0, terminal_e),
        ("H", params.H_ch_max, params.H_dis_max, params.eta_H_ch,
         params.eta_H_dis, params.S_H_min, params.S_H_max, start.S_H,
         params.S_H_0, terminal_h),
    )
    for (which, ch_max, dis_max, eta_ch, eta_dis, s_min, s_max, s_now,
         s_return, terminal) in carriers:
        prev_level = Lin.of(float(s_now))
        for k in slots:
            ch = b.add_var(f"{which}_ch[{k}]", lb=0.0, ub=ch_max)
            dis = b.add_var(f"{which}_dis[{k}]", lb=0.0, ub=dis_max)
            s = b.add_var(f"S_{which}[{k}]", lb=s_min, ub=s_max)
            net = b.add_var(f"{which}_s[{k}]")
            b.add_eq(Lin.term(net) - Lin.term(ch, dk) + Lin.term(dis, dk))
            b.add_eq(Lin.term(s) - prev_level - Lin.term(ch, eta_ch * dk)
                     + Lin.term(dis, dk / eta_dis))
            prev_level = Lin.term(s)
            v[f"{which}_ch"][k] = ch
            v[f"{which}_dis"][k] = dis
            v[f"S_{which}"][k] = s
            v[f"{which}_s"][k] = net
        if terminal:
            b.add_eq(prev_level, s_return)

    for which, prev, consumed in (("e", prev_e, consumed_e),
                                  ("h", prev_h, consumed_h)):
        s_min, s_max, ramp, day_total = profiles.elastic(which)
        dvars = [b.add_var(f"D_{which}_s[{k}]", lb=0.0) for k in slots]
        rows = demand_window_rows(dvars, s_min, s_max, ramp, day_total,
                                  dk=dk, consumed=consumed, prev=prev)
        for kind, expr, rhs in rows:
            (b.add_le if kind == "le" else b.add_ge)(expr, rhs)
        for k, d in zip(slots, dvars):
            v[f"D_{which}_s"][k] = d

    for k in slots:
        v["E_T"][k] = b.add_var(f"E_T[{k}]", lb=-params.E_T_max,
                                ub=params.E_T_max)
    return v


def _settlement_epigraph(b, t, op, k, profiles):
    """Bound t from below by storage wear minus served-demand utility,
    both quadratic pieces in one cone row."""
    weights = [profiles.a_s_E, profiles.a_s_H,
               -profiles.alpha_e, -profiles.alpha_h]
    exprs = [Lin.term(op["E_s"][k]), Lin.term(op["H_s"][k]),
             Lin.term(op["D_e_s"][k]), Lin.term(op["D_h_s"][k])]
    linear = Lin.term(op["D_e_s"][k], -profiles.beta_e) \
        + Lin.term(op["D_h_s"][k], -profiles.beta_h)
    b.add_quad_le(weights, exprs, Lin.term(t) - linear, tag=f"fsd[{k}]")


def _tracking_epigraph(b, op, k, penalties, anchors):
    """Epigraph of the quadratic deviation cost around an anchored plan.

    The deviation penalty depends on the decision variables alone, never on
    the uncertain price or load, so it prices directly into the objective
    instead of passing through the worst-case expectation.
    """
    weights, exprs = [], []
    for c, a, var in zip(penalties, anchors,
                         (op["E_s"][k], op["H_s"][k],
                          op["D_e_s"][k], op["D_h_s"][k])):
        if c > 0.0:
            weights.append(float(c))
            exprs.append(Lin.term(var) - float(a))
    if not weights:
        return None
    pen = b.add_var(f"pen[{k}]", lb=0.0, obj=1.0)
    b.add_quad_le(weights, exprs, Lin.term(pen), tag=f"pen[{k}]")
    return pen


# ---------------------------------------------------------------------------
# day-ahead stage


@dataclass
class DayAheadBuild:
    """Built day-ahead program plus the index maps needed to read it back."""

    instance: Instance
    builder: ProblemBuilder
    obj_const: float
    first_stage: dict
    op: dict
    t_fsd: dict
    duals: dict
    carbon: dict
    carbon_market: bool

    def problem(self):
        return self.builder.build()


@dataclass
class DayAheadPlan:
    """Committed purchases plus the referential dispatch behind them."""

    m_e: np.ndarray
    m_g: np.ndarray
    m_c: np.ndarray
    z: np.ndarray
    E_s_ch: np.ndarray
    E_s_dis: np.ndarray
    H_s_ch: np.ndarray
    H_s_dis: np.ndarray
    E_s: np.ndarray
    H_s: np.ndarray
    D_e_s: np.ndarray
    D_h_s: np.ndarray
    E_T: np.ndarray
    S_E: np.ndarray
    S_H: np.ndarray
    alpha_d: np.ndarray
    f_c: np.ndarray
    worst_case: np.ndarray
    objective: float
    parts: dict = field(default_factory=dict)
    status: str = "optimal"

    @property
    def horizon(self):
        return len(self.m_e)

    def schedule(self) -> HubSchedule:
        return HubSchedule(m_e=self.m_e, m_g=self.m_g, m_c=self.m_c,
                           E_s_ch=self.E_s_ch, E_s_dis=self.E_s_dis,
                           H_s_ch=self.H_s_ch, H_s_dis=self.H_s_dis,
                           D_e_s=self.D_e_s, D_h_s=self.D_h_s, E_T=self.E_T,
                           dk=DK)


def build_day_ahead(instance: Instance, carbon_market=True) -> DayAheadBuild:
    """Assemble the mixed-binary conic day-ahead program.

    With ``carbon_market`` off the credit budgets are pinned to zero and no
    settlement cost is charged, which is the reference point for measuring
    what the stepped carbon price changes.
    """
    params, profiles = instance.params, instance.profiles
    T = instance.horizon
    b = ProblemBuilder()
    obj_const = 0.0
    op = _emit_operation_block(b, params, profiles, range(T))

    first_stage = {"m_e": {}, "m_g": {}, "m_c": {}}
    carbon = {}
    t_fsd = {}
    duals = {}
    for k in range(T):
        p_ie = float(profiles.p_ie[k])
        p_ig = float(profiles.p_ig[k])
        D_h_u = float(profiles.D_h_u[k])
        budget = float(profiles.MN[k])
        slot = _carbon_slot(params, profiles, k)
        m_e_max = params.E_in_max * p_ie
        m_g_max = params.G_in_max * p_ig
        # credits beyond covering the largest reachable emission level are
        # never useful, and the tighter cap keeps the indicator big-M small
        e_coef, g_coef = slot.emission_coeffs
        e_p_max = e_coef * m_e_max + g_coef * m_g_max
        m_c_cap = min(budget, max(0.0, slot.K_c
                                  * (e_p_max - params.quota_per_slot)))
        m_e = b.add_var(f"m_e[{k}]", lb=params.E_in_min * p_ie,
                        ub=m_e_max, obj=1.0)
        m_g = b.add_var(f"m_g[{k}]", lb=params.G_in_min * p_ig,
                        ub=m_g_max, obj=1.0)
        m_c = b.add_var(f"m_c[{k}]", lb=0.0,
                        ub=m_c_cap if carbon_market else 0.0, obj=1.0)
        b.add_le(Lin.term(m_e) + Lin.term(m_g) + Lin.term(m_c), budget)
        first_stage["m_e"][k] = m_e
        first_stage["m_g"][k] = m_g
        first_stage["m_c"][k] = m_c

        if carbon_market:
            cl = linearize(b, slot, m_e, m_g, m_c, m_e_max=m_e_max,
                           m_g_max=m_g_max, m_c_max=m_c_cap, tag=f"[{k}]")
            obj_const += b.add_obj(cl.cost)
            carbon[k] = cl
            # while a slot is uncovered, every credit cent cuts its cost by
            # K_H/K_c - 1 > 0, so whenever full coverage stays affordable
            # for any purchase level the covered branch is provably optimal
            # and the indicator can be pinned without losing anything
            if slot.K_H > slot.K_c and \
                    slot.K_c * max(e_p_max - params.quota_per_slot, 0.0) \
                    + m_e_max + m_g_max <= budget + 1e-9:
                b.add_ge(Lin.term(cl.z), 1.0)

        for row in heat_dispatch_rows(params, p_ig, D_h_u, Lin.term(m_g),
                                      Lin.term(op["D_h_s"][k]),
                                      Lin.term(op["H_s"][k])):
            b.add_le(row, 0.0)

        decisions = {"m_e": m_e, "m_g": m_g, "D_e_s": op["D_e_s"][k],
                     "D_h_s": op["D_h_s"][k], "E_s": op["E_s"][k],
                     "H_s": op["H_s"][k], "E_T": op["E_T"][k]}
        b.add_le(cc_row(params, p_ie, p_ig, D_h_u, decisions,
                        instance.load_set(k), instance.epsilon), 0.0)

        # the epigraph variable enters the objective only through the dual
        # block, which prices its worst-case expectation together with the
        # traded energy
        t = b.add_var(f"t_fsd[{k}]")
        t_fsd[k] = t
        _settlement_epigraph(b, t, op, k, profiles)
        blk = dual_inner_block(b, op["E_T"][k], Lin.term(t),
                               instance.price_set(k), tag=f"[{k}]")
        obj_const += b.add_obj(blk.objective)
        duals[k] = blk

    return DayAheadBuild(instance=instance, builder=b, obj_const=obj_const,
                         first_stage=first_stage, op=op, t_fsd=t_fsd,
                         duals=duals, carbon=carbon,
                         carbon_market=carbon_market)


def _values(x, index_map, slots):
    return np.array([x[index_map[k]] for k in slots])


def solve_day_ahead(instance: Instance, tol=1e-6, gap=1e-3, node_limit=10000,
                    build=None, carbon_market=True) -> DayAheadPlan:
    """Solve the day-ahead program and read the plan back out.

    ``gap`` is the absolute branch-and-bound tolerance in cents; the default
    resolves the carbon indicators far below any reported digit.
    """
    if build is None:
        build = build_day_ahead(instance, carbon_market=carbon_market)
    params, profiles = instance.params, instance.profiles
    T = instance.horizon
    sol = solve_mixed(build.problem(), tol=tol, gap=gap,
                      node_limit=node_limit)
    if not sol.ok:
        raise SolverFailure(f"day-ahead solve ended with status "
                            f"{sol.status!r}", solution=sol)
    x = sol.x
    slots = range(T)
    rate = {name: np.maximum(_values(x, build.op[name], slots), 0.0)
            for name in ("E_ch", "E_dis", "H_ch", "H_dis")}
    m_e = np.maximum(_values(x, build.first_stage["m_e"], slots),
                     params.E_in_min * profiles.p_ie)
    m_g = np.maximum(_values(x, build.first_stage["m_g"], slots),
                     params.G_in_min * profiles.p_ig)
    m_c = np.maximum(_values(x, build.first_stage["m_c"], slots), 0.0)
    D_h_s = _values(x, build.op["D_h_s"], slots)
    H_s = _values(x, build.op["H_s"], slots)
    E_s = _values(x, build.op["E_s"], slots)
    D_e_s = _values(x, build.op["D_e_s"], slots)
    E_T = _values(x, build.op["E_T"], slots)

    if build.carbon_market:
        z = np.array([int(round(x[build.carbon[k].z])) for k in slots])
    else:
        z = np.ones(T, dtype=int)
    f_c = np.array([settlement_cost(m_e[k], m_g[k], m_c[k],
                                    _carbon_slot(params, profiles, k))
                    for k in slots]) if build.carbon_market else np.zeros(T)
    # the recovered fraction divides a feasibility residual by m_g times the
    # efficiency spread, so grant it more slack than the solve tolerance
    alpha_d = np.array([recover_alpha_d(params, profiles.p_ig[k],
                                        profiles.D_h_u[k], m_g[k], D_h_s[k],
                                        H_s[k], tol=1e3 * tol)
                        for k in slots])
    worst = np.array([x[build.duals[k].r] + x[build.duals[k].y]
                      for k in slots])

    purchase = float(np.sum(m_e) + np.sum(m_g))
    credits = float(np.sum(m_c))
    settlement = float(np.sum(f_c))
    mean_market = float(sum(
        storage_wear_cost(profiles.a_s_E, E_s[k])
        + storage_wear_cost(profiles.a_s_H, H_s[k])
        - demand_utility(profiles.alpha_e, profiles.beta_e, D_e_s[k])
        - demand_utility(profiles.alpha_h, profiles.beta_h, D_h_s[k])
        - instance.scenario.p_c_mean[k] * E_T[k] for k in slots))
    parts = {"purchase": purchase, "credits": credits,
             "settlement": settlement, "worst_case": float(np.sum(worst)),
             "second_stage_mean": mean_market,
             "commitment": purchase + credits + settlement}
    return DayAheadPlan(
        m_e=m_e, m_g=m_g, m_c=m_c, z=z,
        E_s_ch=rate["E_ch"], E_s_dis=rate["E_dis"],
        H_s_ch=rate["H_ch"], H_s_dis=rate["H_dis"],
        E_s=E_s, H_s=H_s, D_e_s=D_e_s, D_h_s=D_h_s, E_T=E_T,
        S_E=_values(x, build.op["S_E"], slots),
        S_H=_values(x, build.op["S_H"], slots),
        alpha_d=alpha_d, f_c=f_c, worst_case=worst,
        objective=sol.objective + build.obj_const, parts=parts)


def variable_census(problem) -> dict:
    """Count variables by structural role, derived from their names."""
    groups = {
        "first_stage": ("m_e", "m_g", "m_c"),
        "carbon_indicator": ("z",),
        "carbon_products": ("sigma_me", "sigma_mg", "sigma_mc"),
        "dispatch": ("E_ch", "E_dis", "H_ch", "H_dis", "S_E", "S_H", "E_s",
                     "H_s", "D_e_s", "D_h_s", "E_T"),
        "settlement_epigraph": ("t_fsd",),
        "price_dual": ("r", "Q", "w", "y", "g"),
    }
    lookup = {stem: g for g, stems in groups.items() for stem in stems}
    census = {g: 0 for g in groups}
    census["cone_slack"] = 0
    census["other"] = 0
    for name in problem.names:
        if name.startswith("_"):
            census["cone_slack"] += 1
            continue
        stem = name.split("[", 1)[0]
        census[lookup.get(stem, "other")] += 1
    return census


# ---------------------------------------------------------------------------
# hour-ahead stage


@dataclass
class HourAheadBuild:
    instance: Instance
    plan: DayAheadPlan
    tau: int
    p_c_now: float
    builder: ProblemBuilder
    obj_const: float
    op: dict
    t_fsd: dict
    duals: dict
    penalties: tuple

    def problem(self):
        return self.builder.build()


@dataclass
class HourAheadPlan:
    """Remainder-of-day re-dispatch; only slot ``tau`` is acted upon."""

    tau: int
    slots: list
    arrays: dict
    committed: dict
    provisional: dict
    parts: dict
    objective: float
    worst_case: np.ndarray


def build_hour_ahead(instance: Instance, plan: DayAheadPlan, tau: int,
                     p_c_now: float, state: StorageState = None,
                     consumed_e=None, consumed_h=None, prev_e=None,
                     prev_h=None, sigma_shrink=0.5, penalty_scale=1.0,
                     terminal_e=True) -> HourAheadBuild:
    """Assemble the hour-ahead re-dispatch for slots tau..T-1.

    Purchases stay at their day-ahead values.  Slot ``tau`` prices the trade
    at the realized ``p_c_now``; later slots keep worst-case expectations
    over forecast sets whose standard deviations shrink by ``sigma_shrink``.
    Defaults for the execution state reproduce the day-ahead trajectory, so
    a caller that feeds nothing back gets plan-consistent behavior.
    """
    params, profiles = instance.params, instance.profiles
    T = instance.horizon
    if not 0 <= tau < T:
        raise ValueError(f"slot {tau} outside the horizon")
    slots = list(range(tau, T))
    if state is None:
        S_E = plan.S_E[tau - 1] if tau else params.S_E_0
        S_H = plan.S_H[tau - 1] if tau else params.S_H_0
        state = StorageState(float(S_E), float(S_H))
    if consumed_e is None:
        consumed_e = float(np.sum(plan.D_e_s[:tau]))
    if consumed_h is None:
        consumed_h = float(np.sum(plan.D_h_s[:tau]))
    if prev_e is None and tau:
        prev_e = float(plan.D_e_s[tau - 1])
    if prev_h is None and tau:
        prev_h = float(plan.D_h_s[tau - 1])

    pen = (profiles.C_E_pn * penalty_scale, profiles.C_H_pn * penalty_scale,
           profiles.C_De_pn * penalty_scale,
           profiles.C_Dh_pn * penalty_scale)
    b = ProblemBuilder()
    obj_const = 0.0
    op = _emit_operation_block(b, params, profiles, slots, start=state,
                               terminal_e=terminal_e, terminal_h=True,
                               prev_e=prev_e, prev_h=prev_h,
                               consumed_e=consumed_e, consumed_h=consumed_h)
    t_fsd = {}
    duals = {}
    for k in slots:
        p_ie = float(profiles.p_ie[k])
        p_ig = float(profiles.p_ig[k])
        D_h_u = float(profiles.D_h_u[k])
        m_e = float(plan.m_e[k])
        m_g = float(plan.m_g[k])
        for row in heat_dispatch_rows(params, p_ig, D_h_u, m_g,
                                      Lin.term(op["D_h_s"][k]),
                                      Lin.term(op["H_s"][k])):
            b.add_le(row, 0.0)
        decisions = {"m_e": m_e, "m_g": m_g, "D_e_s": op["D_e_s"][k],
                     "D_h_s": op["D_h_s"][k], "E_s": op["E_s"][k],
                     "H_s": op["H_s"][k], "E_T": op["E_T"][k]}
        load_set = instance.load_set(
            k, sigmas=sigma_shrink * np.array(
                [instance.scenario.u_f_sigma[k],
                 instance.scenario.d_e_u_sigma[k]]))
        b.add_le(cc_row(params, p_ie, p_ig, D_h_u, decisions, load_set,
                        instance.epsilon), 0.0)

        anchors = (float(plan.E_s[k]), float(plan.H_s[k]),
                   float(plan.D_e_s[k]), float(plan.D_h_s[k]))
        # the realized slot prices its epigraph directly; later slots price
        # it through their dual blocks, exactly as the day-ahead stage does
        t = b.add_var(f"t_fsd[{k}]", obj=1.0 if k == tau else 0.0)
        t_fsd[k] = t
        _settlement_epigraph(b, t, op, k, profiles)
        _tracking_epigraph(b, op, k, pen, anchors)
        if k == tau:
            obj_const += b.add_obj(Lin.term(op["E_T"][k], -p_c_now))
        else:
            price_set = instance.price_set(
                k, sigma=sigma_shrink * float(instance.scenario.p_c_sigma[k]))
            blk = dual_inner_block(b, op["E_T"][k], Lin.term(t), price_set,
                                   tag=f"[{k}]")
            obj_const += b.add_obj(blk.objective)
            duals[k] = blk
    return HourAheadBuild(instance=instance, plan=plan, tau=tau,
                          p_c_now=p_c_now, builder=b, obj_const=obj_const,
                          op=op, t_fsd=t_fsd, duals=duals, penalties=pen)


def solve_hour_ahead(build: HourAheadBuild, tol=1e-6) -> HourAheadPlan:
    """Solve the hour-ahead program and book slot-tau costs from primitives."""
    sol = solve_continuous(build.problem(), tol=tol)
    if not sol.ok:
        raise SolverFailure(f"hour-ahead solve at slot {build.tau} ended "
                            f"with status {sol.status!r}", solution=sol)
    x = sol.x
    slots = list(range(build.tau, build.plan.horizon))
    arrays = {name: _values(x, build.op[name], slots)
              for name in build.op}
    tau = build.tau
    plan, profiles = build.plan, build.instance.profiles
    c_e, c_h, c_de, c_dh = build.penalties
    at = {name: float(arrays[name][0]) for name in arrays}
    committed = {"E_T": at["E_T"], "H_s": at["H_s"],
                 "H_ch": max(at["H_ch"], 0.0),
                 "H_dis": max(at["H_dis"], 0.0), "D_h_s": at["D_h_s"]}
    provisional = {"E_s": at["E_s"], "D_e_s": at["D_e_s"], "S_E": at["S_E"]}
    parts = {
        "storage": storage_wear_cost(profiles.a_s_E, at["E_s"])
        + storage_wear_cost(profiles.a_s_H, at["H_s"]),
        "utility": demand_utility(profiles.alpha_e, profiles.beta_e,
                                  at["D_e_s"])
        + demand_utility(profiles.alpha_h, profiles.beta_h, at["D_h_s"]),
        "penalty": tracking_penalty(c_e, at["E_s"], plan.E_s[tau])
        + tracking_penalty(c_h, at["H_s"], plan.H_s[tau])
        + tracking_penalty(c_de, at["D_e_s"], plan.D_e_s[tau])
        + tracking_penalty(c_dh, at["D_h_s"], plan.D_h_s[tau]),
        "market": -build.p_c_now * at["E_T"],
    }
    parts = {name: float(v) for name, v in parts.items()}
    parts["total"] = parts["storage"] - parts["utility"] \
        + parts["penalty"] + parts["market"]
    worst = np.array([x[build.duals[k].r] + x[build.duals[k].y]
                      for k in slots if k in build.duals])
    return HourAheadPlan(tau=tau, slots=slots, arrays=arrays,
                         committed=committed, provisional=provisional,
                         parts=parts, objective=sol.objective
                         + build.obj_const, worst_case=worst)


# ---------------------------------------------------------------------------
# intra-hour stage


@dataclass
class QuarterDispatch:
    """One executed quarter hour."""

    tau: int
    m: int
    D_e_s: float
    E_ch: float
    E_dis: float
    E_s: float
    S_E: float
    short: float
    long: float
    parts: dict
    objective: float


def solve_intra_hour(instance: Instance, tau: int, m: int, committed: dict,
                     anchors: tuple, state_E: float, u_f: float, d_e_u: float,
                     m_e: float, m_g: float, prev_quarter=None,
                     envelope=True, penalty_scale=1.0, slack_price=100.0,
                     tie_break=1e-6, tol=1e-8) -> QuarterDispatch:
    """Track one quarter hour against the hourly plan.

    The only degrees of freedom are the served elastic electric demand, the
    electric storage flows, and two signed imbalance slacks priced at
    ``slack_price``; everything hourly is a constant taken from ``committed``.
    The storage state is kept inside a reachability funnel that narrows to
    the initial state at the day's last quarter, so the daily cycle survives
    any realization.
    """
    params, profiles = instance.params, instance.profiles
    T = instance.horizon
    d_anchor, e_anchor = anchors
    c_de = profiles.C_De_pn * penalty_scale
    c_e = profiles.C_E_pn * penalty_scale

    s_min, s_max, ramp, _ = profiles.elastic("e")
    lo, hi = s_min * DM, s_max * DM
    if prev_quarter is not None:
        lo = max(lo, prev_quarter - ramp * DM)
        hi = min(hi, prev_quarter + ramp * DM)
    if lo > hi + 1e-12:
        raise StructuralInfeasibility(
            f"quarter demand window empty at slot {tau}.{m}")

    if envelope:
        remaining = (T - tau - 1) * QUARTERS + (QUARTERS - 1 - m)
        S_hi = min(params.S_E_max,
                   params.S_E_0 + remaining * params.E_dis_max * DM
                   / params.eta_E_dis)
        S_lo = max(params.S_E_min,
                   params.S_E_0 - remaining * params.eta_E_ch
                   * params.E_ch_max * DM)
    else:
        S_lo, S_hi = params.S_E_min, params.S_E_max

    b = ProblemBuilder()
    d = b.add_var("D_e_s", lb=lo, ub=hi,
                  quad=(c_de - profiles.alpha_e) / DM,
                  obj=-2.0 * c_de * d_anchor - profiles.beta_e)
    # the wear cost only sees the net flow, so charge and discharge span a
    # flat direction; a sub-cent quadratic tie-break makes the one-sided
    # split strictly optimal and keeps the problem strongly convex
    ch = b.add_var("E_ch", lb=0.0, ub=params.E_ch_max, quad=tie_break)
    dis = b.add_var("E_dis", lb=0.0, ub=params.E_dis_max, quad=tie_break)
    e_net = b.add_var("E_s", quad=(c_e + profiles.a_s_E) / DM,
                      obj=-2.0 * c_e * e_anchor)
    s = b.add_var("S_E", lb=S_lo, ub=S_hi)
    short = b.add_var("short", lb=0.0, obj=slack_price)
    long = b.add_var("long", lb=0.0, obj=slack_price)
    b.add_eq(Lin.term(e_net) - Lin.term(ch, DM) + Lin.term(dis, DM))
    b.add_eq(Lin.term(s) - Lin.term(ch, params.eta_E_ch * DM)
             + Lin.term(dis, DM / params.eta_E_dis), state_E)

    k = tau
    decisions = {"m_e": m_e, "m_g": m_g,
                 "D_e_s": Lin.term(d, 1.0 / DM),
                 "D_h_s": committed["D_h_s"],
                 "E_s": Lin.term(e_net, 1.0 / DM),
                 "H_s": committed["H_s"], "E_T": committed["E_T"]}
    row = balance_terms(params, profiles.p_ie[k], profiles.p_ig[k],
                        profiles.D_h_u[k], decisions) \
        + (d_e_u - params.eta_T * u_f) / DM \
        - Lin.term(short, 1.0 / DM) + Lin.term(long, 1.0 / DM)
    b.add_eq(row, 0.0)

    obj_const = DM * (c_de * d_anchor ** 2 + c_e * e_anchor ** 2)
    sol = solve_continuous(b.build(), tol=tol)
    if not sol.ok:
        raise SolverFailure(f"intra-hour solve at {tau}.{m} ended with "
                            f"status {sol.status!r}", solution=sol)
    x = sol.x
    served = float(x[d])
    net = float(x[e_net])
    parts = {
        "storage": float(storage_wear_cost(profiles.a_s_E, net, DM)),
        "utility": float(demand_utility(profiles.alpha_e, profiles.beta_e,
                                        served, DM)),
        "penalty": float(tracking_penalty(c_de, served, d_anchor, DM)
                         + tracking_penalty(c_e, net, e_anchor, DM)),
        "slack": float(slack_price * (x[short] + x[long])),
    }
    parts["total"] = parts["storage"] - parts["utility"] + parts["penalty"] \
        + parts["slack"]
    return QuarterDispatch(tau=tau, m=m, D_e_s=served,
                           E_ch=max(float(x[ch]), 0.0),
                           E_dis=max(float(x[dis]), 0.0), E_s=net,
                           S_E=float(x[s]), short=float(x[short]),
                           long=float(x[long]), parts=parts,
                           objective=sol.objective + obj_const)


# ---------------------------------------------------------------------------
# rolling execution


@dataclass
class RollingOptions:
    """Knobs of the rolling loop; the defaults reproduce the full scheme."""

    mode: str = "M1"
    sigma_shrink: float = 0.5
    penalty_scale: float = 1.0
    slack_price: float = None
    tol: float = 1e-6
    gap: float = 1e-3
    node_limit: int = 10000
    tie_break: float = 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class DispatchLedger:
    """Execution record of one rolling day: what ran, and what it cost.

    ``quarters`` holds the physical electric record and quarter-level costs;
    ``hours`` holds the hourly commitments with their booked heat and market
    costs plus the hour-ahead parallel account.  ``totals`` aggregates both,
    next to the day-ahead commitment decided before delivery began.
    """

    mode: str
    plan: DayAheadPlan
    seed: int
    slack_price: float
    penalty_scale: float
    quarters: list = field(default_factory=list)
    hours: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    def quarter_rows(self):
        """Rows of the ledger CSV, hour-level costs booked on quarter 0."""
        rows = []
        for q in self.quarters:
            h = self.hours[q["tau"]]
            first = q["m"] == 0
            row = {
                "quarter": q["tau"] * QUARTERS + q["m"],
                "u_f": q["u_f"], "D_e_u": q["D_e_u"], "p_c": h["p_c"],
                "D_e_s": q["D_e_s"], "E_s_ch": q["E_ch"],
                "E_s_dis": q["E_dis"], "S_E": q["S_E"],
                "H_s": h["H_s"], "D_h_s": h["D_h_s"], "E_T": h["E_T"],
                "cost_storage": q["parts"]["storage"]
                + (h["parts"]["storage"] if first else 0.0),
                "cost_utility": -q["parts"]["utility"]
                - (h["parts"]["utility"] if first else 0.0),
                "cost_penalty": q["parts"]["penalty"]
                + (h["parts"]["penalty"] if first else 0.0),
                "cost_market": h["parts"]["market"] if first else 0.0,
                "cost_slack": q["parts"]["slack"],
            }
            row["cost_total"] = row["cost_storage"] + row["cost_utility"] \
                + row["cost_penalty"] + row["cost_market"] \
                + row["cost_slack"]
            rows.append(row)
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LEDGER_CSV_HEADER)
            w.writeheader()
            for row in self.quarter_rows():
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                            for k, v in row.items()})

    def audit(self, instance: Instance) -> dict:
        """Recompute every booked total from recorded primitives.

        Returns the recomputed totals plus the largest absolute deviation
        from the stored ones under ``deviation``; anything above round-off
        means the booking and the record went out of sync.
        """
        params, profiles = instance.params, instance.profiles
        c_scale = self.penalty_scale
        day = {"purchase": float(np.sum(self.plan.m_e)
                                 + np.sum(self.plan.m_g)),
               "credits": float(np.sum(self.plan.m_c)),
               "settlement": float(sum(
                   settlement_cost(self.plan.m_e[k], self.plan.m_g[k],
                                   self.plan.m_c[k],
                                   _carbon_slot(params, profiles, k))
                   for k in range(self.plan.horizon)))}
        day["total"] = day["purchase"] + day["credits"] + day["settlement"]

        intra = {"storage": 0.0, "utility": 0.0, "penalty": 0.0,
                 "market": 0.0, "slack": 0.0}
        for q in self.quarters:
            h = self.hours[q["tau"]]
            intra["storage"] += storage_wear_cost(profiles.a_s_E, q["E_s"],
                                                  DM)
            intra["utility"] += demand_utility(profiles.alpha_e,
                                               profiles.beta_e, q["D_e_s"],
                                               DM)
            intra["penalty"] += tracking_penalty(
                profiles.C_De_pn * c_scale, q["D_e_s"], h["anchor_D"], DM)
            intra["penalty"] += tracking_penalty(
                profiles.C_E_pn * c_scale, q["E_s"], h["anchor_E"], DM)
            intra["slack"] += self.slack_price * (q["short"] + q["long"])
        for h in self.hours:
            tau = h["tau"]
            intra["storage"] += storage_wear_cost(profiles.a_s_H, h["H_s"])
            intra["utility"] += demand_utility(profiles.alpha_h,
                                               profiles.beta_h, h["D_h_s"])
            intra["penalty"] += tracking_penalty(
                profiles.C_H_pn * c_scale, h["H_s"], self.plan.H_s[tau])
            intra["penalty"] += tracking_penalty(
                profiles.C_Dh_pn * c_scale, h["D_h_s"],
                self.plan.D_h_s[tau])
            intra["market"] += -h["p_c"] * h["E_T"]
        intra["total"] = intra["storage"] - intra["utility"] \
            + intra["penalty"] + intra["market"] + intra["slack"]
        intra = {key: float(val) for key, val in intra.items()}

        recomputed = {"day_ahead": day, "intra_hour": intra,
                      "overall": day["total"] + intra["total"]}
        dev = abs(recomputed["overall"] - self.totals["overall"])
        for level in ("day_ahead", "intra_hour"):
            for key, val in recomputed[level].items():
                dev = max(dev, abs(val - self.totals[level][key]))
        if "hour_ahead" in self.totals:
            ha_total = 0.0
            for h in self.hours:
                if h["hour_ahead"] is None:
                    continue
                tau = h["tau"]
                sto = storage_wear_cost(profiles.a_s_E, h["anchor_E"]) \
                    + storage_wear_cost(profiles.a_s_H, h["H_s"])
                util = demand_utility(profiles.alpha_e, profiles.beta_e,
                                      h["anchor_D"]) \
                    + demand_utility(profiles.alpha_h, profiles.beta_h,
                                     h["D_h_s"])
                pen = tracking_penalty(profiles.C_E_pn * c_scale,
                                       h["anchor_E"], self.plan.E_s[tau]) \
                    + tracking_penalty(profiles.C_H_pn * c_scale, h["H_s"],
                                       self.plan.H_s[tau]) \
                    + tracking_penalty(profiles.C_De_pn * c_scale,
                                       h["anchor_D"],
                                       self.plan.D_e_s[tau]) \
                    + tracking_penalty(profiles.C_Dh_pn * c_scale,
                                       h["D_h_s"], self.plan.D_h_s[tau])
                ha_total += sto - util + pen - h["p_c"] * h["E_T"]
            recomputed["hour_ahead"] = {"total": ha_total}
            dev = max(dev, abs(ha_total - self.totals["hour_ahead"]["total"]))
        recomputed["deviation"] = dev
        return recomputed


def _assemble_totals(ledger: DispatchLedger):
    plan = ledger.plan
    day = {"purchase": plan.parts["purchase"],
           "credits": plan.parts["credits"],
           "settlement": plan.parts["settlement"],
           "total": plan.parts["commitment"]}
    intra = {"storage": 0.0, "utility": 0.0, "penalty": 0.0, "market": 0.0,
             "slack": 0.0}
    for q in ledger.quarters:
        for key in ("storage", "utility", "penalty", "slack"):
            intra[key] += q["parts"][key]
    for h in ledger.hours:
        intra["storage"] += h["parts"]["storage"]
        intra["utility"] += h["parts"]["utility"]
        intra["penalty"] += h["parts"]["penalty"]
        intra["market"] += h["parts"]["market"]
    intra["total"] = intra["storage"] - intra["utility"] + intra["penalty"] \
        + intra["market"] + intra["slack"]
    totals = {"day_ahead": day, "intra_hour": intra,
              "overall": day["total"] + intra["total"]}
    if any(h["hour_ahead"] is not None for h in ledger.hours):
        totals["hour_ahead"] = {"total": float(sum(
            h["hour_ahead"]["total"] for h in ledger.hours
            if h["hour_ahead"] is not None))}
    ledger.totals = totals
    return ledger


def run_rolling(instance: Instance, trace: ScenarioTrace,
                options: RollingOptions = None,
                plan: DayAheadPlan = None) -> DispatchLedger:
    """Execute one day against a realization trace.

    Modes: M1 runs the full scheme; M2 skips the hour-ahead stage and tracks
    the day-ahead plan directly; M3 drops the electric-storage cycle
    constraints and executes the hour-ahead stage on its own predicted
    storage state instead of the realized one; M4 withholds the executed
    elastic-demand feedback from the hour-ahead stage.  Any stage failure
    raises :class:`RollingError` carrying the partial ledger.
    """
    options = options or RollingOptions()
    params, profiles = instance.params, instance.profiles
    T = instance.horizon
    if plan is None:
        try:
            plan = solve_day_ahead(instance, tol=options.tol,
                                   gap=options.gap,
                                   node_limit=options.node_limit)
        except (SolverFailure, StructuralInfeasibility) as exc:
            raise RollingError(str(exc), level="day-ahead", tau=-1) from exc
    hourly_p_c = trace.hourly_p_c()
    slack_price = options.slack_price
    if slack_price is None:
        slack_price = 5.0 * float(np.max(hourly_p_c))
    ledger = DispatchLedger(mode=options.mode, plan=plan, seed=trace.seed,
                            slack_price=slack_price,
                            penalty_scale=options.penalty_scale)

    mode = options.mode
    state_E = params.S_E_0
    state_H = params.S_H_0
    ha_state_E = params.S_E_0
    consumed_e = 0.0
    consumed_e_ha = 0.0
    consumed_h = 0.0
    prev_e = None
    prev_e_ha = None
    prev_h = None
    prev_q = None
    c_h = profiles.C_H_pn * options.penalty_scale
    c_dh = profiles.C_Dh_pn * options.penalty_scale

    for tau in range(T):
        p_c_now = float(hourly_p_c[tau])
        try:
            if mode == "M2":
                ha = None
                committed = {"E_T": float(plan.E_T[tau]),
                             "H_s": float(plan.H_s[tau]),
                             "H_ch": float(plan.H_s_ch[tau]),
                             "H_dis": float(plan.H_s_dis[tau]),
                             "D_h_s": float(plan.D_h_s[tau])}
                anchors = (float(plan.D_e_s[tau]), float(plan.E_s[tau]))
            else:
                build = build_hour_ahead(
                    instance, plan, tau, p_c_now,
                    state=StorageState(
                        ha_state_E if mode == "M3" else state_E, state_H),
                    consumed_e=consumed_e_ha if mode == "M4" else consumed_e,
                    consumed_h=consumed_h,
                    prev_e=prev_e_ha if mode == "M4" else prev_e,
                    prev_h=prev_h, sigma_shrink=options.sigma_shrink,
                    penalty_scale=options.penalty_scale,
                    terminal_e=mode != "M3")
                ha = solve_hour_ahead(build, tol=options.tol)
                committed = ha.committed
                anchors = (ha.provisional["D_e_s"], ha.provisional["E_s"])
        except (SolverFailure, StructuralInfeasibility) as exc:
            raise RollingError(str(exc), level="hour-ahead", tau=tau,
                               ledger=_assemble_totals(ledger)) from exc

        hour = {"tau": tau, "p_c": p_c_now, "E_T": committed["E_T"],
                "H_s": committed["H_s"], "H_ch": committed["H_ch"],
                "H_dis": committed["H_dis"], "D_h_s": committed["D_h_s"],
                "anchor_D": anchors[0], "anchor_E": anchors[1],
                "hour_ahead": dict(ha.parts) if ha is not None else None}
        hour["parts"] = {
            "storage": float(storage_wear_cost(profiles.a_s_H,
                                               committed["H_s"])),
            "utility": float(demand_utility(profiles.alpha_h, profiles.beta_h,
                                            committed["D_h_s"])),
            "penalty": float(tracking_penalty(c_h, committed["H_s"],
                                              plan.H_s[tau])
                             + tracking_penalty(c_dh, committed["D_h_s"],
                                                plan.D_h_s[tau])),
            "market": float(-p_c_now * committed["E_T"]),
        }
        ledger.hours.append(hour)

        served_hour = 0.0
        for m in range(QUARTERS):
            try:
                qd = solve_intra_hour(
                    instance, tau, m, committed, anchors, state_E,
                    u_f=float(trace.u_f[tau, m]),
                    d_e_u=float(trace.d_e_u[tau, m]),
                    m_e=float(plan.m_e[tau]), m_g=float(plan.m_g[tau]),
                    prev_quarter=prev_q, envelope=mode != "M3",
                    penalty_scale=options.penalty_scale,
                    slack_price=slack_price, tie_break=options.tie_break,
                    tol=options.tol)
            except (SolverFailure, StructuralInfeasibility) as exc:
                raise RollingError(str(exc), level="intra-hour", tau=tau,
                                   quarter=m,
                                   ledger=_assemble_totals(ledger)) from exc
            state_E = qd.S_E
            prev_q = qd.D_e_s
            served_hour += qd.D_e_s
            ledger.quarters.append({
                "tau": tau, "m": m, "u_f": float(trace.u_f[tau, m]),
                "D_e_u": float(trace.d_e_u[tau, m]), "D_e_s": qd.D_e_s,
                "E_ch": qd.E_ch, "E_dis": qd.E_dis, "E_s": qd.E_s,
                "S_E": qd.S_E, "short": qd.short, "long": qd.long,
                "parts": qd.parts})

        state_H = step_storage(StorageState(state_E, state_H),
                               committed["H_ch"], committed["H_dis"], "H",
                               DK, params).S_H
        if ha is not None and mode == "M3":
            ha_state_E = float(ha.provisional["S_E"])
        consumed_e += served_hour
        consumed_e_ha += anchors[0]
        consumed_h += committed["D_h_s"]
        prev_e = served_hour
        prev_e_ha = anchors[0]
        prev_h = committed["D_h_s"]

    return _assemble_totals(ledger)
