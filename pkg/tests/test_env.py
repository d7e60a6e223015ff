import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flat_day
from diffcarl.codec import ActionCodec
from diffcarl.env import (
    COST_TERMS,
    ActionSetpoints,
    ConfigError,
    EnvState,
    EssParams,
    MgcConfig,
    MicrogridConfig,
    default_config_2mg,
    initial_state,
    observe,
    project_feasible,
    run_episode,
    step,
)

ONE = MgcConfig()


def test_default_values():
    c = default_config_2mg()
    assert c.n_microgrids == 2
    assert c.carbon_grid == 0.412 and c.carbon_cdg == 0.9 and c.carbon_price == 0.025
    for m in c.microgrids:
        assert (m.ess.e_min_kwh, m.ess.e_max_kwh, m.ess.e_init_kwh) == (200.0, 1800.0, 1000.0)
        assert (m.ess.eta_ch, m.ess.eta_dis) == (0.9, 0.95)
        assert (m.cdg.cost_a, m.cdg.cost_b, m.cdg.cost_c) == (0.004, 0.066, 0.7)
        assert m.cdg.ramp_max_kw_per_h == 20.0 and m.shed_max_frac == 0.5
    assert default_config_2mg() == c


def test_invalid_params():
    with pytest.raises(ConfigError):
        EssParams(e_init_kwh=100.0)
    with pytest.raises(ConfigError):
        EssParams(eta_ch=0.0)
    with pytest.raises(ConfigError):
        MgcConfig(reward_scale=0.0)
    with pytest.raises(ConfigError):
        MgcConfig(microgrids=())
    with pytest.raises(ConfigError):
        MgcConfig.from_dict({"no_such_key": 1})


def test_toml_round_trip(tmp_path):
    c = default_config_2mg().with_(carbon_price=0.0, sell_ratio=0.5)
    c.to_toml(tmp_path / "env.toml")
    assert MgcConfig.from_toml(tmp_path / "env.toml") == c


def test_observation():
    c = default_config_2mg()
    day = flat_day(load=100.0, price=0.1, pv=40.0, wt=10.0)
    obs = observe(initial_state(c), day, c)
    assert obs.shape == (8,)
    assert obs[3] == 0.5 and obs[7] == 0.5
    # second microgrid: pv 0.5, wind 1.5, load 1.2
    np.testing.assert_allclose(obs[4:7], [120.0, 0.5 * 40 + 1.5 * 10, 0.1])
    low = EnvState(0, (200.0, 1800.0), (0.0, 0.0))
    assert list(observe(low, day, c)[[3, 7]]) == [0.0, 1.0]
    with pytest.raises(IndexError):
        observe(EnvState(24, (1000.0, 1000.0), (0.0, 0.0)), day, c)


def test_projection_interior_unchanged():
    req = ActionSetpoints((50.0,), (10.0,), (5.0,))
    out, clipped = project_feasible(req, initial_state(ONE), flat_day(load=100.0), ONE)
    assert out == req and clipped == 0.0


def test_projection_ramp():
    req = ActionSetpoints((0.0,), (100.0,), (0.0,))
    out, clipped = project_feasible(req, initial_state(ONE), flat_day(load=100.0), ONE)
    assert out.p_cdg_kw == (20.0,) and clipped == 80.0


def test_projection_full_storage():
    req = ActionSetpoints((-100.0,), (0.0,), (0.0,))
    out, clipped = project_feasible(req, EnvState(0, (1800.0,), (0.0,)), flat_day(load=100.0), ONE)
    assert out.p_ess_kw == (0.0,) and clipped == 100.0


def test_projection_shedding_cap():
    req = ActionSetpoints((0.0,), (0.0,), (80.0,))
    out, clipped = project_feasible(req, initial_state(ONE), flat_day(load=100.0), ONE)
    assert out.p_ls_kw == (50.0,) and clipped == 30.0


def test_step_hand_example():
    day = flat_day(load=100.0, pv=40.0, price=0.1)
    res = step(EnvState(0, (1000.0,), (30.0,)), ActionSetpoints((20.0,), (30.0,), (0.0,)), day, ONE)
    assert res.grid_exchange_kw[0] == pytest.approx(10.0, abs=1e-12)
    assert res.breakdown["cdg_fuel"] == pytest.approx(6.28, abs=1e-12)
    assert res.carbon_kg == pytest.approx(31.12, abs=1e-12)
    assert res.breakdown["carbon_cost"] == pytest.approx(0.778, abs=1e-12)
    assert res.breakdown["grid_buy"] == pytest.approx(1.0, abs=1e-12)
    assert res.breakdown["ess_degradation"] == pytest.approx(0.1, abs=1e-12)
    assert res.next_state.soc_kwh[0] == pytest.approx(1000.0 - 20.0 / 0.95)
    assert res.next_state.hour == 1 and res.next_state.prev_cdg_kw == (30.0,)
    assert not res.clipped


def test_step_charge_soc():
    res = step(initial_state(ONE), ActionSetpoints((-100.0,), (0.0,), (0.0,)), flat_day(load=100.0), ONE)
    assert res.next_state.soc_kwh[0] == pytest.approx(1090.0)


def test_step_sell_revenue():
    cfg = ONE.with_(sell_ratio=0.5)
    res = step(initial_state(cfg), ActionSetpoints((0.0,), (0.0,), (0.0,)), flat_day(load=10.0, pv=50.0, price=0.2), cfg)
    assert res.grid_exchange_kw[0] == -40.0
    assert res.breakdown["grid_sell_revenue"] == pytest.approx(4.0)
    assert res.cost_total == pytest.approx(-4.0)
    assert res.carbon_kg == 0.0


def test_idle_episode_zero_profile():
    idle = lambda obs, s: ActionSetpoints((0.0,) * 2, (0.0,) * 2, (0.0,) * 2)
    m = run_episode(idle, flat_day(), default_config_2mg())
    assert m.cost == 0.0 and m.carbon_kg == 0.0 and m.violations == 0.0


def test_idle_episode_constant_load():
    idle = lambda obs, s: ActionSetpoints((0.0,), (0.0,), (0.0,))
    m = run_episode(idle, flat_day(load=100.0, price=0.1), ONE)
    assert m.cost == pytest.approx(264.72, abs=1e-9)
    assert m.carbon_kg == pytest.approx(24 * 41.2)
    assert len(m.traces) == 24


def test_episode_deterministic_and_csv(tmp_path, month):
    rng = np.random.default_rng(0)
    actions = rng.integers(0, 45, size=(24, 2))
    ctrl = lambda obs, s: actions[s.hour]
    c = default_config_2mg()
    a = run_episode(ctrl, month.day(0), c)
    b = run_episode(ctrl, month.day(0), c)
    pd.testing.assert_frame_equal(a.traces, b.traces)
    a.to_csv(tmp_path / "ep.csv")
    df = pd.read_csv(tmp_path / "ep.csv")
    assert len(df) == 25 and df["hour"].iloc[-1] == "total"
    assert df["cost_total"].iloc[-1] == pytest.approx(a.cost)
    assert (a.actions() == actions).all()


def test_episode_rejects_non_finite_action():
    def bad(obs, s):
        v = math.nan if s.hour == 5 else 0.0
        return ActionSetpoints((v,), (0.0,), (0.0,))
    with pytest.raises(ValueError, match="hour 5"):
        run_episode(bad, flat_day(load=1.0), ONE)


def test_episode_needs_24_rows():
    with pytest.raises(ValueError):
        run_episode(lambda o, s: [0], flat_day(hours=48), ONE)


def test_carbon_price_changes_only_costs(month):
    c = default_config_2mg()
    acts = np.random.default_rng(1).integers(0, 45, size=(24, 2))
    ctrl = lambda obs, s: acts[s.hour]
    a = run_episode(ctrl, month.day(2), c).traces
    b = run_episode(ctrl, month.day(2), c.with_(carbon_price=0.0)).traces
    flows = [col for col in a.columns if col.startswith(("p_", "soc_"))] + ["carbon_kg", "clipped_kwh"]
    pd.testing.assert_frame_equal(a[flows], b[flows])
    assert (b["carbon_cost"] == 0).all()
    assert (a["carbon_cost"] > 0).any()


_state = st.tuples(
    st.integers(0, 23),
    st.floats(200.0, 1800.0),
    st.floats(0.0, 200.0),
)
_setpoint = st.tuples(st.floats(-400, 400), st.floats(-100, 400), st.floats(-50, 300))


@settings(max_examples=300, deadline=None)
@given(s=st.lists(_state, min_size=2, max_size=2), a=st.lists(_setpoint, min_size=2, max_size=2),
       day=st.integers(0, 30))
def test_step_invariants(month, s, a, day):
    c = default_config_2mg()
    prof = month.day(day)
    state = EnvState(s[0][0], [x[1] for x in s], [x[2] for x in s])
    req = ActionSetpoints(*zip(*a))
    res = step(state, req, prof, c)
    app = res.applied
    for i, m in enumerate(c.microgrids):
        h = state.hour
        load = m.load_scale * prof.load_kw[h]
        rdg = m.pv_scale * prof.pv_kw[h] + m.wt_scale * prof.wt_kw[h]
        lhs = load - app.p_ls_kw[i]
        rhs = rdg + app.p_cdg_kw[i] + app.p_ess_kw[i] + res.grid_exchange_kw[i]
        assert abs(lhs - rhs) <= 1e-9
        assert m.ess.e_min_kwh <= res.next_state.soc_kwh[i] <= m.ess.e_max_kwh
        assert abs(app.p_cdg_kw[i] - state.prev_cdg_kw[i]) <= m.cdg.ramp_max_kw_per_h + 1e-9
        assert 0 <= app.p_ls_kw[i] <= m.shed_max_frac * load + 1e-9
    b = res.breakdown
    total = sum(b[k] for k in COST_TERMS if k != "grid_sell_revenue") - b["grid_sell_revenue"]
    assert res.cost_total == pytest.approx(total, abs=1e-9)
    assert res.carbon_kg >= 0
    assert res.reward == -res.cost_total / c.reward_scale
    again = step(state, req, prof, c)
    assert again.cost_total == res.cost_total and again.next_state == res.next_state


def test_codec_actions_accepted(month):
    c = default_config_2mg()
    res = step(initial_state(c), np.array([ActionCodec().encode(2, 0, 0)] * 2), month.day(0), c)
    assert res.applied.p_ess_kw == (0.0, 0.0)
    with pytest.raises(ValueError):
        step(initial_state(c), np.array([1, 2, 3]), month.day(0), c)
