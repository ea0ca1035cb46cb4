"""Settlement cost branches and the exactness of the big-M linearization."""

import numpy as np
import pytest

from hubsched.carbon import (
    CarbonSlot,
    big_m,
    emissions,
    indicator,
    linearize,
    settlement_cost,
)
from hubsched.conic import ProblemBuilder, solve_mixed

M_E_MAX, M_G_MAX, M_C_MAX = 650.0, 840.0, 2000.0


def _slot(**over):
    base = dict(K_c=1.2, K_H=3.0, quota=110.0, C_o2e=0.6, C_o2g=0.5,
                p_ie=5.0, p_ig=2.4)
    base.update(over)
    return CarbonSlot(**base)


def test_slot_invariants():
    with pytest.raises(ValueError):
        _slot(K_H=1.0)  # undercuts the credit price
    with pytest.raises(ValueError):
        _slot(K_c=0.0)
    with pytest.raises(ValueError):
        _slot(quota=-1.0)
    with pytest.raises(ValueError):
        _slot(p_ig=0.0)


def test_emissions_oracles():
    assert emissions(0.0, 0.0, _slot()) == 0.0
    s = _slot(p_ie=1.0, p_ig=0.5)
    assert emissions(100.0, 100.0, s) == pytest.approx(160.0)
    assert emissions(0.0, 90.0, s) == pytest.approx(90.0)
    with pytest.raises(ValueError):
        emissions(-1.0, 0.0, s)


def test_settlement_at_quota_is_free():
    s = _slot(p_ie=1.0)
    m_e = s.quota / s.emission_coeffs[0]
    assert settlement_cost(m_e, 0.0, 0.0, s) == pytest.approx(0.0, abs=1e-12)


def test_settlement_over_emission_branch():
    s = _slot(p_ie=1.0, K_H=5.0)
    m_e = 160.0 / s.emission_coeffs[0]
    assert settlement_cost(m_e, 0.0, 0.0, s) == pytest.approx(250.0)
    assert indicator(m_e, 0.0, 0.0, s) == 0


def test_settlement_surplus_credit_revenue():
    s = _slot(p_ie=1.0, K_c=3.0, K_H=3.0)
    m_e = 100.0 / s.emission_coeffs[0]
    assert settlement_cost(m_e, 0.0, 0.0, s) == pytest.approx(-30.0)
    assert indicator(m_e, 0.0, 0.0, s) == 1


def test_branches_agree_at_breakpoint():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s = _slot(K_c=rng.uniform(0.5, 3.0), K_H=rng.uniform(3.0, 6.0),
                  quota=rng.uniform(0, 200))
        e_p = s.quota + rng.uniform(0.0, 100.0)
        m_e = e_p / s.emission_coeffs[0]
        m_c = s.K_c * (e_p - s.quota)
        inside = s.K_c * (e_p - s.quota) - m_c
        outside = s.K_H * (e_p - s.quota - m_c / s.K_c)
        assert abs(inside - outside) <= 1e-9
        assert settlement_cost(m_e, 0.0, m_c, s) == pytest.approx(0.0, abs=1e-9)


def test_settlement_monotonicity():
    rng = np.random.default_rng(6)
    s = _slot()
    for _ in range(200):
        m_e = rng.uniform(0, M_E_MAX)
        m_g = rng.uniform(0, M_G_MAX)
        m_c = rng.uniform(0, 100)
        base = settlement_cost(m_e, m_g, m_c, s)
        assert settlement_cost(m_e + 10, m_g, m_c, s) >= base - 1e-12
        assert settlement_cost(m_e, m_g + 10, m_c, s) >= base - 1e-12
        assert settlement_cost(m_e, m_g, m_c + 10, s) <= base + 1e-12


def test_settlement_convex_in_emissions():
    s = _slot(C_o2e=1.0, p_ie=1.0)  # emissions equal the electricity budget
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b = sorted(rng.uniform(0, 400, 2))
        m_c = rng.uniform(0, 120)
        mid = settlement_cost((a + b) / 2, 0.0, m_c, s)
        avg = (settlement_cost(a, 0.0, m_c, s)
               + settlement_cost(b, 0.0, m_c, s)) / 2
        assert mid <= avg + 1e-9


def test_big_m_requires_finite_bounds():
    with pytest.raises(ValueError):
        big_m(_slot(), M_E_MAX, np.inf, M_C_MAX)
    assert big_m(_slot(), M_E_MAX, M_G_MAX, M_C_MAX) >= M_C_MAX


def _linearized_model(slot):
    builder = ProblemBuilder()
    me = builder.add_var("m_e", 0.0, M_E_MAX)
    mg = builder.add_var("m_g", 0.0, M_G_MAX)
    mc = builder.add_var("m_c", 0.0, M_C_MAX)
    lin = linearize(builder, slot, me, mg, mc, M_E_MAX, M_G_MAX, M_C_MAX)
    return builder, (me, mg, mc), lin


def test_linearized_cost_matches_piecewise_everywhere():
    slot = _slot()
    builder, (me, mg, mc), lin = _linearized_model(slot)
    prob = builder.build()
    rng = np.random.default_rng(8)
    branch_counts = [0, 0]
    for _ in range(1000):
        v_e = rng.uniform(0, M_E_MAX)
        v_g = rng.uniform(0, M_G_MAX)
        v_c = rng.uniform(0, M_C_MAX if rng.random() < 0.5 else 30.0)
        z = indicator(v_e, v_g, v_c, slot)
        branch_counts[z] += 1
        x = np.zeros(prob.n)
        x[me], x[mg], x[mc] = v_e, v_g, v_c
        x[lin.z] = z
        x[lin.sigma_me] = z * v_e
        x[lin.sigma_mg] = z * v_g
        x[lin.sigma_mc] = z * v_c
        assert np.all(prob.A_ub @ x <= prob.b_ub + 1e-6)
        assert np.all(x >= prob.lb - 1e-9) and np.all(x <= prob.ub + 1e-9)
        got = lin.cost.value(x)
        want = settlement_cost(v_e, v_g, v_c, slot)
        assert got == pytest.approx(want, abs=1e-6)
        # flipping the indicator must break feasibility away from the kink
        gap = emissions(v_e, v_g, slot) - v_c / slot.K_c - slot.quota
        if abs(gap) > 1e-6:
            x[lin.z] = 1 - z
            x[lin.sigma_me] = (1 - z) * v_e
            x[lin.sigma_mg] = (1 - z) * v_g
            x[lin.sigma_mc] = (1 - z) * v_c
            assert np.any(prob.A_ub @ x > prob.b_ub + 1e-9)
    assert min(branch_counts) >= 100


def test_linearization_solved_as_mip_recovers_settlement():
    slot = _slot()
    rng = np.random.default_rng(9)
    for _ in range(40):
        v_e = rng.uniform(0, M_E_MAX)
        v_g = rng.uniform(0, M_G_MAX)
        v_c = rng.uniform(0, 40.0)
        builder = ProblemBuilder()
        me = builder.add_var("m_e", v_e, v_e)
        mg = builder.add_var("m_g", v_g, v_g)
        mc = builder.add_var("m_c", v_c, v_c)
        lin = linearize(builder, slot, me, mg, mc, M_E_MAX, M_G_MAX, M_C_MAX)
        const = builder.add_obj(lin.cost)
        sol = solve_mixed(builder.build())
        assert sol.ok
        want = settlement_cost(v_e, v_g, v_c, slot)
        assert sol.objective + const == pytest.approx(want, abs=1e-5)
        gap = emissions(v_e, v_g, slot) - v_c / slot.K_c - slot.quota
        if abs(gap) > 1e-5:
            assert round(sol.x[lin.z]) == indicator(v_e, v_g, v_c, slot)


def test_zero_budgets_force_credit_sale_of_quota():
    slot = _slot()
    builder = ProblemBuilder()
    me = builder.add_var("m_e", 0.0, 0.0)
    mg = builder.add_var("m_g", 0.0, 0.0)
    mc = builder.add_var("m_c", 0.0, 0.0)
    lin = linearize(builder, slot, me, mg, mc, M_E_MAX, M_G_MAX, M_C_MAX)
    const = builder.add_obj(lin.cost)
    sol = solve_mixed(builder.build())
    assert sol.ok
    assert round(sol.x[lin.z]) == 1
    assert sol.objective + const == pytest.approx(-slot.K_c * slot.quota,
                                                  abs=1e-6)
