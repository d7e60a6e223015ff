import itertools

import numpy as np
import pytest

from conftest import flat_day
from diffcarl.codec import ActionCodec
from diffcarl.env import (
    CdgParams,
    EnvState,
    EssParams,
    MgcConfig,
    MicrogridConfig,
    default_config_2mg,
    initial_state,
    run_episode,
    step,
)
from diffcarl.profiles import TimeSeriesProfile
from diffcarl.schedulers import (
    DpGrid,
    ForecastModel,
    MpcController,
    _MgPlanner,
    _perturb,
    day_ahead,
    forecast,
    forecast_after,
    mpc,
    myopic,
    offline_dp,
    replay,
)

NOISELESS = ForecastModel(0.0, 0.0)


def myopic_controller(config, day):
    return lambda obs, s: myopic(s, day, config)


def test_forecast_noiseless_and_seeded(month):
    day = month.day(0)
    assert forecast(day, 1, NOISELESS) is day
    m = ForecastModel(seed=5)
    assert forecast(day, 1, m) == forecast(day, 1, m)
    assert not forecast(day, 1, m) == forecast(day, 1, ForecastModel(seed=6))
    assert min(forecast(day, 3, m).price) >= 0
    with pytest.raises(ValueError):
        forecast(day, 0, m)
    with pytest.raises(ValueError):
        ForecastModel(sigma0=-0.1)


def test_forecast_error_growth():
    m = ForecastModel(0.05, 0.15 / 7)
    n = 100_000
    series = {k: np.full(n, 100.0) for k in ("pv_kw", "wt_kw", "load_kw", "price")}
    out = _perturb(series, np.full(n, 8), m, 0)
    assert out["load_kw"].std() / 100 == pytest.approx(0.05 + 8 * 0.15 / 7, rel=0.02)
    assert 0.05 + 8 * 0.15 / 7 == pytest.approx(0.221, abs=1e-3)


def test_forecast_after_keeps_past(month):
    day = month.day(1)
    f = forecast_after(day, 5, ForecastModel(seed=2))
    assert np.array_equal(f.load_kw[:6], day.load_kw[:6])
    assert not np.array_equal(f.load_kw[6:], day.load_kw[6:])


def test_myopic_matches_enumeration(month):
    c = default_config_2mg()
    rng = np.random.default_rng(0)
    for _ in range(40):
        day = month.day(int(rng.integers(31)))
        s = EnvState(int(rng.integers(24)), rng.uniform(200, 1800, 2), rng.choice([0.0, 20.0, 100.0], 2))
        got = myopic(s, day, c)
        for i in range(2):
            sub = c.subset([i])
            one = EnvState(s.hour, (s.soc_kwh[i],), (s.prev_cdg_kw[i],))
            costs = [step(one, np.array([a]), day, sub).cost_total for a in range(45)]
            assert got[i] == int(np.argmin(costs))


def test_myopic_idle_on_empty_row():
    c = default_config_2mg()
    assert list(myopic(initial_state(c), flat_day(), c)) == [ActionCodec().encode(2, 0, 0)] * 2


def test_myopic_avoids_cdg_when_grid_free():
    c = default_config_2mg().with_(carbon_price=0.0)
    day = flat_day(load=150.0, price=0.0)
    a = myopic(initial_state(c), day, c)
    _, cdg_i, _ = ActionCodec().levels(a)
    assert list(cdg_i) == [0, 0]


def toy_config():
    ess = EssParams(capacity_kwh=200.0, eta_ch=1.0, eta_dis=1.0, p_ch_max_kw=100.0, p_dis_max_kw=100.0,
                    e_min_kwh=0.0, e_max_kwh=200.0, e_init_kwh=100.0)
    return MgcConfig(microgrids=(MicrogridConfig(ess=ess, cdg=CdgParams()),))


TOY_CODEC = ActionCodec(ess_levels=(-1.0, 1.0), cdg_levels=(0.0,), ls_levels=(0.0,))


@pytest.mark.parametrize("prices", [(0.1, 0.5, 0.05), (0.3, 0.1, 0.4), (0.2, 0.2, 0.2)])
def test_dp_matches_exhaustive_toy(prices):
    c = toy_config()
    ts = np.datetime64("2024-01-01", "h") + np.arange(24)
    price = np.full(24, 0.1)
    price[:3] = prices
    day = TimeSeriesProfile(ts, np.zeros(24), np.zeros(24), np.full(24, 50.0), price)
    plan = _MgPlanner(c, 0, TOY_CODEC, DpGrid(3))
    exo = [(50.0, 0.0, p) for p in prices]
    V, pol = plan.backward(exo)
    best = np.inf
    for seq in itertools.product(range(2), repeat=3):
        s, total = initial_state(c), 0.0
        for a in seq:
            res = step(s, np.array([a]), day, c, TOY_CODEC)
            total += res.cost_total
            s = res.next_state
        best = min(best, total)
    assert V[0][1, 0] == pytest.approx(best, abs=1e-12)


def test_offline_zero_day_is_idle():
    c = default_config_2mg()
    sched, cost = offline_dp(flat_day(), c)
    assert cost == 0.0
    assert (sched == ActionCodec().encode(2, 0, 0)).all()


def test_offline_errors(month):
    with pytest.raises(ValueError, match="e_init"):
        offline_dp(month.day(0), default_config_2mg(), DpGrid(4))
    with pytest.raises(ValueError):
        offline_dp(month.slice(0, 48), default_config_2mg())
    with pytest.raises(ValueError):
        DpGrid(2)


def test_offline_plan_matches_replay(month):
    c = default_config_2mg()
    sched, planned = offline_dp(month.day(3), c)
    assert sched.shape == (24, 2)
    assert replay(sched, month.day(3), c).cost == pytest.approx(planned, rel=1e-9)


def test_day_ahead_noiseless_equals_offline(month):
    c = default_config_2mg()
    sched, _ = offline_dp(month.day(4), c)
    assert day_ahead(month.day(4), c, NOISELESS).cost == replay(sched, month.day(4), c).cost


def test_day_ahead_noise_hurts_on_average(month):
    c = default_config_2mg()
    day = month.day(5)
    base = day_ahead(day, c, NOISELESS).cost
    noisy = [day_ahead(day, c, ForecastModel(0.3, 0.03, seed=s)).cost for s in range(20)]
    assert np.mean(noisy) >= base


def test_mpc_horizon_one_is_myopic(month):
    c = default_config_2mg()
    day = month.day(6)
    a = mpc(day, c, ForecastModel(), horizon=1)
    b = run_episode(myopic_controller(c, day), day, c)
    assert (a.actions() == b.actions()).all() and a.cost == b.cost
    with pytest.raises(ValueError):
        MpcController(day, c, horizon=0)


def test_mpc_beats_myopic_on_price_spike():
    c = default_config_2mg()
    price = np.full(24, 0.05)
    price[10:14] = 0.6
    ts = np.datetime64("2024-01-01", "h") + np.arange(24)
    day = TimeSeriesProfile(ts, np.zeros(24), np.zeros(24), np.full(24, 150.0), price)
    lookahead = mpc(day, c, NOISELESS, horizon=8).cost
    greedy = run_episode(myopic_controller(c, day), day, c).cost
    assert lookahead < greedy


def test_dominance_chain_sample_days(month):
    c = default_config_2mg()
    for d in (0, 9, 17):
        day = month.day(d)
        off = replay(offline_dp(day, c)[0], day, c).cost
        m24 = mpc(day, c, NOISELESS, horizon=24).cost
        m8 = mpc(day, c, NOISELESS, horizon=8).cost
        my = run_episode(myopic_controller(c, day), day, c).cost
        assert off <= m24 * 1.01 and m24 <= m8 * 1.01 and m8 <= my * 1.01


def test_mpc24_noiseless_close_to_offline(month):
    c = default_config_2mg()
    day = month.day(12)
    off = replay(offline_dp(day, c)[0], day, c).cost
    assert mpc(day, c, NOISELESS, horizon=24).cost == pytest.approx(off, rel=0.01)
