import json

import numpy as np
import pytest

from hubsched.instance import Instance, bundled_instance, load_instance, save_instance
from hubsched.uncertainty import DiscreteDistribution, ScenarioConfig, contains


def test_bundled_instance_loads():
    inst = bundled_instance()
    assert inst.horizon == 24
    assert inst.params.eta_T == 0.98
    assert inst.params.E_in_max == 130.0
    assert inst.params.S_H_max == 500.0
    assert inst.params.quota_per_slot == 110.0
    assert (inst.gamma1, inst.gamma2, inst.epsilon) == (0.12, 1.12, 0.05)
    assert inst.profiles.D_e_s_max == 30.0
    assert "defaults" in inst.notes


def test_bundled_curves_shape():
    inst = bundled_instance()
    # two-peak electricity price: a morning and an evening local maximum
    p = inst.profiles.p_ie
    morning = int(np.argmax(p[:14]))
    evening = 14 + int(np.argmax(p[14:]))
    assert 6 <= morning <= 12 and 17 <= evening <= 21
    assert p[morning] > p[13] < p[evening]
    # renewable output peaks midday and vanishes overnight
    uf = inst.scenario.u_f_mean
    assert 10 <= int(np.argmax(uf)) <= 14
    assert uf[0] == uf[23] == 0.0
    # heat load is night-heavy
    dh = inst.profiles.D_h_u
    assert dh[1] > dh[12]


def test_price_set_pulls_scenario_moments():
    inst = bundled_instance()
    s = inst.price_set(9)
    assert s.moments.scalar_mean == pytest.approx(inst.scenario.p_c_mean[9])
    assert s.moments.scalar_var == pytest.approx(inst.scenario.p_c_sigma[9] ** 2)
    assert s.support is not None and float(s.support[0][0]) == 0.0
    point = DiscreteDistribution(np.array([s.moments.scalar_mean]),
                                 np.array([1.0]))
    assert contains(s, point)


def test_price_set_overrides():
    inst = bundled_instance()
    s = inst.price_set(3, mean=9.0, sigma=0.5)
    assert s.moments.scalar_mean == 9.0
    assert s.moments.scalar_var == pytest.approx(0.25)


def test_load_set_is_two_dimensional():
    inst = bundled_instance()
    s = inst.load_set(12)
    assert s.dim == 2
    assert s.moments.mean[0] == pytest.approx(inst.scenario.u_f_mean[12])
    assert s.moments.second[0, 1] == 0.0
    assert s.moments.second[1, 1] == pytest.approx(
        inst.scenario.d_e_u_sigma[12] ** 2)


def test_save_load_round_trip(tmp_path):
    inst = bundled_instance()
    save_instance(inst, tmp_path / "copy")
    back = load_instance(tmp_path / "copy")
    assert back.name == inst.name
    assert back.params == inst.params
    np.testing.assert_allclose(back.profiles.p_ie, inst.profiles.p_ie)
    np.testing.assert_allclose(back.profiles.MN, inst.profiles.MN)
    np.testing.assert_allclose(back.scenario.p_c_sigma, inst.scenario.p_c_sigma)
    assert back.profiles.C_De_pn == inst.profiles.C_De_pn
    assert (back.gamma1, back.gamma2, back.epsilon) == \
        (inst.gamma1, inst.gamma2, inst.epsilon)


def test_horizon_mismatch_rejected():
    inst = bundled_instance()
    short = ScenarioConfig(
        u_f_mean=inst.scenario.u_f_mean[:12],
        u_f_sigma=inst.scenario.u_f_sigma[:12],
        d_e_u_mean=inst.scenario.d_e_u_mean[:12],
        d_e_u_sigma=inst.scenario.d_e_u_sigma[:12],
        p_c_mean=inst.scenario.p_c_mean[:12],
        p_c_sigma=inst.scenario.p_c_sigma[:12])
    with pytest.raises(ValueError, match="horizon"):
        Instance(name="x", params=inst.params, profiles=inst.profiles,
                 scenario=short)


def test_bad_epsilon_rejected():
    inst = bundled_instance()
    with pytest.raises(ValueError, match="epsilon"):
        Instance(name="x", params=inst.params, profiles=inst.profiles,
                 scenario=inst.scenario, epsilon=1.0)


def test_bad_radii_rejected():
    inst = bundled_instance()
    with pytest.raises(ValueError):
        Instance(name="x", params=inst.params, profiles=inst.profiles,
                 scenario=inst.scenario, gamma1=0.5, gamma2=0.4)


def test_load_instance_from_config_path(tmp_path):
    inst = bundled_instance()
    cfg = save_instance(inst, tmp_path)
    assert cfg.name == "instance.json"
    again = load_instance(cfg)
    assert again.horizon == 24


def test_missing_profiles_file_raises(tmp_path):
    inst = bundled_instance()
    cfg = save_instance(inst, tmp_path)
    doc = json.loads(cfg.read_text())
    doc["files"]["profiles"] = "nope.csv"
    cfg.write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError):
        load_instance(cfg)
