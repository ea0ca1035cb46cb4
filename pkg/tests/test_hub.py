"""Hub conversions, constraint rows, and schedule validation."""

import numpy as np
import pytest

from hubsched.hub import (
    HubParams,
    HubSchedule,
    MarketProfiles,
    StorageState,
    StructuralInfeasibility,
    convert_energy,
    demand_window_rows,
    heat_dispatch_rows,
    purchase_from_budget,
    read_profiles_csv,
    recover_alpha_d,
    step_storage,
    storage_series,
    validate_schedule,
    write_profiles_csv,
)

TOL = 1e-9


def _params(**over):
    base = dict(
        eta_T=0.98, eta_M_e=0.35, eta_M_h=0.4, eta_G=0.9,
        eta_E_ch=0.97, eta_E_dis=0.97, eta_H_ch=0.87, eta_H_dis=0.87,
        E_in_max=130.0, E_in_min=0.0, G_in_max=350.0, G_in_min=0.0,
        E_T_max=100.0, G_MT_max=300.0, G_GF_max=250.0,
        E_ch_max=20.0, E_dis_max=20.0, H_ch_max=50.0, H_dis_max=50.0,
        S_E_min=20.0, S_E_max=160.0, S_H_min=50.0, S_H_max=500.0,
        S_E_0=20.0, S_H_0=50.0,
        C_o2e=0.6, C_o2g=0.5, quota_per_slot=110.0,
    )
    base.update(over)
    return HubParams(**base)


def _profiles(T=4, **over):
    base = dict(
        p_ie=np.full(T, 5.0), p_ig=np.full(T, 2.4),
        K_c=np.full(T, 1.2), K_H=np.full(T, 3.0),
        D_h_u=np.zeros(T), MN=np.full(T, 2000.0),
    )
    base.update(over)
    return MarketProfiles(**base)


def _value(expr):
    return expr.value(np.zeros(0))


# ---------------------------------------------------------------------------
# conversions


def test_convert_energy_zero():
    assert convert_energy(_params(), 0, 0, 0, 0.0, 0, 0) == (0.0, 0.0)


def test_convert_energy_turbine_only():
    e, h = convert_energy(_params(), 100.0, 0.0, 100.0, 1.0, 0.0, 0.0)
    assert e == pytest.approx(133.0, abs=TOL)
    assert h == pytest.approx(40.0, abs=TOL)


def test_convert_energy_furnace_only():
    e, h = convert_energy(_params(), 100.0, 0.0, 100.0, 0.0, 0.0, 0.0)
    assert e == pytest.approx(98.0, abs=TOL)
    assert h == pytest.approx(90.0, abs=TOL)


def test_convert_energy_domain_errors():
    p = _params()
    with pytest.raises(ValueError):
        convert_energy(p, 1, 1, 1, 1.5, 0, 0)
    with pytest.raises(ValueError):
        convert_energy(p, -1, 0, 0, 0.5, 0, 0)


def test_heat_coefficient_is_convex_combination():
    p = _params()
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = rng.uniform(0, 1)
        u_g = rng.uniform(0, 300)
        _, h = convert_energy(p, 0, 0, u_g, a, 0.0, 0.0)
        if u_g > 0:
            coeff = h / u_g
            assert p.eta_M_h - TOL <= coeff <= p.eta_G + TOL


def test_purchase_from_budget():
    assert purchase_from_budget(0, 0, 5.0, 2.4) == (0.0, 0.0)
    u_e, _ = purchase_from_budget(130.0, 0.0, 1.0, 2.4)
    assert u_e == pytest.approx(130.0)
    with pytest.raises(ValueError):
        purchase_from_budget(1.0, 1.0, 0.0, 2.4)
    with pytest.raises(ValueError):
        purchase_from_budget(-1.0, 0.0, 5.0, 2.4)


# ---------------------------------------------------------------------------
# storage


def test_step_storage_noop():
    s = StorageState(S_E=30.0, S_H=60.0)
    assert step_storage(s, 0, 0, "E", 1.0, _params()) == s


def test_step_storage_charge_oracle():
    s = step_storage(StorageState(20.0, 50.0), 20.0, 0.0, "E", 1.0, _params())
    assert s.S_E == pytest.approx(39.4, abs=TOL)
    assert s.S_H == 50.0


def test_step_storage_rate_cap():
    with pytest.raises(ValueError, match="discharge rate"):
        step_storage(StorageState(100.0, 50.0), 0.0, 30.0, "E", 1.0, _params())


def test_step_storage_bound_violation():
    with pytest.raises(ValueError, match="outside"):
        step_storage(StorageState(155.0, 50.0), 20.0, 0.0, "E", 1.0, _params())


def test_step_storage_roundtrip_loses_energy():
    p = _params()
    s0 = StorageState(80.0, 200.0)
    s1 = step_storage(s0, 10.0, 0.0, "E", 1.0, p)
    # discharging exactly what charging stored still drains the state
    gained = s1.S_E - s0.S_E
    s2 = step_storage(s1, 0.0, gained * p.eta_E_dis, "E", 1.0, p)
    assert s2.S_E == pytest.approx(s0.S_E)
    assert gained * p.eta_E_dis < 10.0


def test_storage_series_matches_stepping():
    p = _params()
    rng = np.random.default_rng(3)
    ch = rng.uniform(0, 5, 8)
    dis = rng.uniform(0, 5, 8)
    series = storage_series(p, ch, dis, "H", dk=1.0)
    s = StorageState(p.S_E_0, p.S_H_0)
    for k in range(8):
        s = StorageState(s.S_E, s.S_H + p.eta_H_ch * ch[k] - dis[k] / p.eta_H_dis)
        assert series[k] == pytest.approx(s.S_H)


# ---------------------------------------------------------------------------
# heat dispatch rows


def test_heat_rows_zero_point():
    rows = heat_dispatch_rows(_params(), 0.5, 0.0, 0.0, 0.0, 0.0)
    assert all(_value(r) <= TOL for r in rows)


def test_heat_rows_oracle():
    rows = heat_dispatch_rows(_params(), 0.5, 40.0, 45.0, 0.0, 0.0)
    vals = [_value(r) for r in rows]
    assert vals[0] == pytest.approx(-20.5, abs=TOL)
    assert vals[1] == pytest.approx(-2.0, abs=TOL)
    assert vals[2] == pytest.approx(-54.5, abs=TOL)
    assert vals[3] == pytest.approx(-60.5, abs=TOL)
    assert all(v <= 0 for v in vals)


def test_heat_rows_huge_gas_violates_turbine_cap():
    rows = heat_dispatch_rows(_params(), 0.5, 40.0, 1e6, 0.0, 0.0)
    assert _value(rows[2]) > 0


def test_heat_rows_price_guard():
    with pytest.raises(ValueError):
        heat_dispatch_rows(_params(), 0.0, 0.0, 0.0, 0.0, 0.0)


def _direct_feasible(p, p_ig, D_h_u, m_g, D_h_s, H_s, tol=1e-9):
    """Ground truth: does some dispatch fraction close the heat balance?"""
    u_g = m_g / p_ig
    theta = D_h_u + D_h_s + H_s
    if u_g <= 1e-12:
        return abs(theta) <= tol
    alpha = (theta / u_g - p.eta_G) / (p.eta_M_h - p.eta_G)
    if alpha < -tol / u_g or alpha > 1 + tol / u_g:
        return False
    alpha = min(max(alpha, 0.0), 1.0)
    return (alpha * u_g <= p.G_MT_max + tol
            and (1 - alpha) * u_g <= p.G_GF_max + tol)


def test_heat_rows_equivalent_to_dispatch_existence():
    p = _params()
    rng = np.random.default_rng(11)
    agree_feasible = agree_infeasible = 0
    for _ in range(1000):
        p_ig = rng.uniform(0.3, 3.0)
        u_g = rng.uniform(0.0, 400.0)
        m_g = u_g * p_ig
        D_h_u = rng.uniform(0.0, 120.0)
        D_h_s = rng.uniform(0.0, 30.0)
        H_s = rng.uniform(-50.0, 50.0)
        rows = heat_dispatch_rows(p, p_ig, D_h_u, m_g, D_h_s, H_s)
        rows_ok = all(_value(r) <= 1e-9 for r in rows)
        direct_ok = _direct_feasible(p, p_ig, D_h_u, m_g, D_h_s, H_s)
        assert rows_ok == direct_ok
        if rows_ok:
            agree_feasible += 1
            alpha = recover_alpha_d(p, p_ig, D_h_u, m_g, D_h_s, H_s)
            _, h_out = convert_energy(p, 0, 0, u_g, alpha, 0.0, H_s)
            assert h_out == pytest.approx(D_h_u + D_h_s, abs=1e-6 * (1 + u_g))
        else:
            agree_infeasible += 1
    assert agree_feasible >= 100
    assert agree_infeasible >= 100


def test_recover_alpha_d():
    p = _params()
    assert recover_alpha_d(p, 0.5, 40.0, 45.0, 0.0, 0.0) == pytest.approx(41 / 45)
    assert recover_alpha_d(p, 0.5, 40.0, 0.0, 0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        recover_alpha_d(p, 0.5, 500.0, 45.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# demand windows


def test_demand_window_rows_shapes_and_rhs():
    rows = demand_window_rows([0.0, 0.0, 0.0], 0.0, 20.0, 5.0, 30.0,
                              consumed=10.0)
    kinds = [r[0] for r in rows]
    assert kinds.count("ge") == 1 + 3 + 2  # daily min, boxes, ramps
    assert kinds.count("le") == 3 + 2
    daily = rows[0]
    assert daily[0] == "ge" and daily[2] == pytest.approx(20.0)


def test_demand_window_prev_anchor_adds_ramp_pair():
    base = demand_window_rows([0.0, 0.0], 0.0, 20.0, 5.0, 10.0)
    anchored = demand_window_rows([0.0, 0.0], 0.0, 20.0, 5.0, 10.0, prev=18.0)
    assert len(anchored) == len(base) + 2


def test_demand_window_structurally_infeasible():
    with pytest.raises(StructuralInfeasibility):
        demand_window_rows([0.0] * 4, 0.0, 20.0, 5.0, 100.0)


def test_demand_window_vacuous_daily_minimum():
    rows = demand_window_rows([0.0], 0.0, 20.0, 5.0, 0.0)
    assert rows[0][2] == pytest.approx(0.0)


def test_demand_window_scales_with_slot_length():
    rows = demand_window_rows([0.0, 0.0], 0.0, 20.0, 5.0, 8.0, dk=0.25)
    box_le = [r for r in rows if r[0] == "le"][:2]
    assert all(r[2] == pytest.approx(5.0) for r in box_le)


# ---------------------------------------------------------------------------
# schedule validation


def _zero_schedule(T=4):
    z = np.zeros(T)
    return HubSchedule(m_e=z.copy(), m_g=z.copy(), m_c=z.copy(),
                       E_s_ch=z.copy(), E_s_dis=z.copy(), H_s_ch=z.copy(),
                       H_s_dis=z.copy(), D_e_s=z.copy(), D_h_s=z.copy(),
                       E_T=z.copy())


def test_validate_zero_schedule_clean():
    profiles = _profiles(D_e_s_day=0.0, D_h_s_day=0.0)
    report = validate_schedule(_zero_schedule(), _params(), profiles)
    assert report == []


def test_validate_flags_budget_and_trade():
    profiles = _profiles(D_e_s_day=0.0, D_h_s_day=0.0)
    sched = _zero_schedule()
    sched.m_e[2] = 2500.0
    sched.E_T[1] = 120.0
    report = validate_schedule(sched, _params(), profiles)
    ids = {(slot, cid) for slot, cid, _ in report}
    assert (2, "budget_cap") in ids
    assert (1, "trade_cap") in ids
    # the oversized purchase also breaches the electricity import cap
    assert (2, "m_e_max") in ids


def test_validate_flags_terminal_and_daily():
    profiles = _profiles(D_e_s_day=50.0, D_h_s_day=0.0)
    sched = _zero_schedule()
    sched.E_s_ch[3] = 10.0
    report = validate_schedule(sched, _params(), profiles)
    ids = {(slot, cid) for slot, cid, _ in report}
    assert (-1, "terminal_E") in ids
    assert (-1, "daily_min_e") in ids


def test_validate_flags_heat_imbalance():
    profiles = _profiles(D_e_s_day=0.0, D_h_s_day=0.0)
    sched = _zero_schedule()
    sched.m_g[0] = 24.0  # gas bought but no heat sink anywhere
    report = validate_schedule(sched, _params(), profiles)
    ids = {cid for slot, cid, _ in report if slot == 0}
    assert "heat_row_1" in ids


def test_validate_feasible_gas_slot_clean():
    profiles = _profiles(D_h_u=np.full(4, 40.0), D_e_s_day=0.0, D_h_s_day=0.0)
    sched = _zero_schedule()
    sched.m_g[:] = 0.5 * 45.0
    profiles.p_ig[:] = 0.5
    report = validate_schedule(sched, _params(), profiles)
    assert report == []


def test_netting_weakly_dominates_simultaneous_flows():
    p = _params()
    rng = np.random.default_rng(19)
    for _ in range(200):
        ch = rng.uniform(0, 20)
        dis = rng.uniform(0, 20)
        net = ch - dis
        raw = p.eta_E_ch * ch - dis / p.eta_E_dis
        netted = p.eta_E_ch * max(net, 0) - max(-net, 0) / p.eta_E_dis
        assert netted >= raw - TOL


# ---------------------------------------------------------------------------
# parameter and profile hygiene


def test_params_invariants():
    with pytest.raises(ValueError):
        _params(eta_G=0.3)  # below eta_M_h
    with pytest.raises(ValueError):
        _params(eta_E_ch=1.0, eta_E_dis=1.0)
    with pytest.raises(ValueError):
        _params(S_E_0=5.0)
    with pytest.raises(ValueError):
        _params(S_E_min=200.0)


def test_params_dict_roundtrip():
    p = _params()
    assert HubParams.from_dict(p.to_dict()) == p


def test_profiles_invariants():
    with pytest.raises(ValueError):
        _profiles(K_H=np.full(4, 0.5))  # undercuts K_c
    with pytest.raises(ValueError):
        _profiles(alpha_e=0.1)
    with pytest.raises(ValueError):
        _profiles(p_ig=np.full(3, 2.4))  # horizon mismatch


def test_profiles_csv_roundtrip(tmp_path):
    profiles = _profiles(T=6, D_h_u=np.linspace(40, 90, 6))
    path = tmp_path / "profiles.csv"
    write_profiles_csv(path, profiles)
    back = read_profiles_csv(path, D_e_s_day=profiles.D_e_s_day)
    for name in ("p_ie", "p_ig", "K_c", "K_H", "D_h_u", "MN"):
        np.testing.assert_allclose(getattr(back, name), getattr(profiles, name))
    assert back.D_e_s_day == profiles.D_e_s_day


def test_profiles_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("slot,price\n0,1.0\n")
    with pytest.raises(ValueError, match="header"):
        read_profiles_csv(path)
