"""Non-learning schedulers: Myopic, Offline DP, Day-ahead and receding-horizon MPC.

All of them use the discrete action codec and the environment's own
projection/cost kernel. Costs are separable across microgrids, so each
microgrid is planned independently.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .codec import ActionCodec
from .env import (
    EnvState,
    MgcConfig,
    exogenous,
    project_arrays,
    run_episode,
    settle_arrays,
)
from .profiles import HOURS_PER_DAY, SERIES, TimeSeriesProfile


@dataclass(frozen=True)
class ForecastModel:
    """Multiplicative Gaussian forecast error with std ``sigma0 + slope * lead``."""

    sigma0: float = 0.05
    slope: float = (0.20 - 0.05) / 7
    seed: int = 0

    def __post_init__(self):
        if self.sigma0 < 0 or self.slope < 0:
            raise ValueError("sigma0 and slope must be non-negative")

    @property
    def noiseless(self) -> bool:
        return self.sigma0 == 0 and self.slope == 0


def _perturb(series: dict, leads: np.ndarray, model: ForecastModel, issue_hour: int) -> dict:
    rng = np.random.default_rng([model.seed, issue_hour + 1])
    sd = model.sigma0 + model.slope * leads
    xi = rng.standard_normal((len(SERIES), len(leads)))
    return {name: np.maximum(0.0, series[name] * (1.0 + sd * xi[j])) for j, name in enumerate(SERIES)}


def forecast(future: TimeSeriesProfile, lead: int, model: ForecastModel, issue_hour: int = 0) -> TimeSeriesProfile:
    """Noisy copy of ``future`` whose first row is ``lead`` hours ahead.

    Noise is drawn from a generator keyed on ``(model.seed, issue_hour)``
    so repeated forecasts issued at the same hour agree.
    """
    if lead < 1:
        raise ValueError("lead must be >= 1")
    if model.noiseless:
        return future
    series = {name: getattr(future, name) for name in SERIES}
    return future.replace(**_perturb(series, lead + np.arange(len(future)), model, issue_hour))


def forecast_after(profile: TimeSeriesProfile, issue_hour: int, model: ForecastModel) -> TimeSeriesProfile:
    """Keep rows up to ``issue_hour`` exact and forecast every later row at lead ``h - issue_hour``."""
    if model.noiseless or issue_hour >= len(profile) - 1:
        return profile
    later = slice(issue_hour + 1, None)
    series = {name: getattr(profile, name)[later] for name in SERIES}
    noisy = _perturb(series, np.arange(1, len(profile) - issue_hour), model, issue_hour)
    out = {}
    for name in SERIES:
        v = getattr(profile, name).copy()
        v[later] = noisy[name]
        out[name] = v
    return profile.replace(**out)


# --- per-microgrid stage kernel -----------------------------------------


@dataclass(frozen=True)
class DpGrid:
    soc_levels: int = 161

    def __post_init__(self):
        if self.soc_levels < 3:
            raise ValueError("soc_levels must be >= 3")


def cdg_states(P: dict, codec: ActionCodec, start: float) -> np.ndarray:
    """Every CDG output reachable from ``start`` under the codec and ramp limits."""
    requests = np.asarray(codec.cdg_levels, dtype=float) * P["p_max"]
    seen = {round(float(start), 9)}
    frontier = [float(start)]
    while frontier:
        c = frontier.pop()
        lo = max(P["p_min"], c - P["ramp"])
        hi = max(lo, min(P["p_max"], c + P["ramp"]))
        for r in requests:
            v = round(float(np.clip(r, lo, hi)), 9)
            if v not in seen:
                seen.add(v)
                frontier.append(v)
        if len(seen) > 10_000:
            raise ValueError("CDG state space does not close; ramp/levels too fine")
    return np.array(sorted(seen))


class _MgPlanner:
    """Dynamic program for one microgrid over (hour, SoC level, CDG state)."""

    def __init__(self, config: MgcConfig, mg: int, codec: ActionCodec, grid: DpGrid):
        self.P = config.params(mg)
        self.mg = mg
        self.config = config
        self.codec = codec
        P = self.P
        self.soc = np.linspace(P["e_min"], P["e_max"], grid.soc_levels)
        self.d_soc = self.soc[1] - self.soc[0]
        self.cdg = cdg_states(P, codec, config.microgrids[mg].cdg.p_min_kw)
        self.actions = np.arange(codec.n_actions)
        self._cache = {}

    def soc_index(self, soc):
        return np.clip(np.rint((soc - self.P["e_min"]) / self.d_soc), 0, len(self.soc) - 1).astype(int)

    def cdg_index(self, cdg):
        idx = np.searchsorted(self.cdg, np.round(cdg, 9))
        return np.clip(idx, 0, len(self.cdg) - 1)

    def outcomes(self, soc, prev_cdg, load, rdg, price):
        """Cost and next (soc, cdg) for every action; broadcasts soc/prev_cdg."""
        P = self.P
        p_ess, p_cdg, p_ls = self.codec.decode(self.actions, load, P["p_ch_max"], P["p_dis_max"], P["p_max"])
        ess, cdg, ls, clipped = project_arrays(p_ess, p_cdg, p_ls, soc, prev_cdg, load, P)
        soc_next, _, _, _, total = settle_arrays(ess, cdg, ls, soc, load, rdg, price, clipped, P)
        return total, soc_next, cdg

    def stage(self, load, rdg, price):
        key = (float(load), float(rdg), float(price))
        if key not in self._cache:
            total, soc_next, cdg = self.outcomes(
                self.soc[:, None, None], self.cdg[None, :, None], load, rdg, price
            )
            total = np.broadcast_to(total, (len(self.soc), len(self.cdg), len(self.actions)))
            si = np.broadcast_to(self.soc_index(soc_next), total.shape)
            ci = np.broadcast_to(self.cdg_index(cdg), total.shape)
            self._cache[key] = (total, si, ci)
        return self._cache[key]

    def backward(self, exo):
        """Value tables ``V[t]`` (``t = 0..T``) and greedy policies for rows of ``exo``."""
        T = len(exo)
        V = [None] * (T + 1)
        pol = [None] * T
        V[T] = np.zeros((len(self.soc), len(self.cdg)))
        for t in range(T - 1, -1, -1):
            total, si, ci = self.stage(*exo[t])
            q = total + V[t + 1][si, ci]
            pol[t] = q.argmin(axis=-1)
            V[t] = np.take_along_axis(q, pol[t][..., None], axis=-1)[..., 0]
        return V, pol

    def first_action(self, soc, prev_cdg, exo_now, V_next):
        """Best action from an exact (off-grid) state given the next value table."""
        total, soc_next, cdg = self.outcomes(soc, prev_cdg, *exo_now)
        q = total + V_next[self.soc_index(soc_next), self.cdg_index(cdg)]
        return int(np.argmin(q))


def _exo_rows(profile, config: MgcConfig, mg: int, start: int = 0, stop: Optional[int] = None):
    stop = len(profile) if stop is None else stop
    return [exogenous(profile, config, h, mg) for h in range(start, stop)]


# --- schedulers ----------------------------------------------------------


def myopic(state: EnvState, profile, config: MgcConfig, codec: Optional[ActionCodec] = None) -> np.ndarray:
    """Per microgrid, the codec action with the lowest immediate cost (lowest index on ties)."""
    codec = codec or ActionCodec()
    out = np.zeros(config.n_microgrids, dtype=int)
    for i in range(config.n_microgrids):
        P = config.params(i)
        load, rdg, price = exogenous(profile, config, state.hour, i)
        acts = np.arange(codec.n_actions)
        p_ess, p_cdg, p_ls = codec.decode(acts, load, P["p_ch_max"], P["p_dis_max"], P["p_max"])
        ess, cdg, ls, clipped = project_arrays(
            p_ess, p_cdg, p_ls, state.soc_kwh[i], state.prev_cdg_kw[i], load, P
        )
        *_, total = settle_arrays(ess, cdg, ls, state.soc_kwh[i], load, rdg, price, clipped, P)
        out[i] = int(np.argmin(total))
    return out


class _Replay:
    def __init__(self, schedule):
        self.schedule = np.asarray(schedule)

    def __call__(self, obs, state):
        return self.schedule[state.hour]


def offline_dp(profile: TimeSeriesProfile, config: MgcConfig, grid: DpGrid = DpGrid(), codec=None):
    """Full-knowledge DP schedule over the SoC grid.

    Returns ``(schedule, planned_cost)`` with ``schedule`` of shape
    ``(24, n_microgrids)``. The value tables live on the grid, but each
    hour's action is chosen from the exact (off-grid) SoC reached so far,
    so rounding never compounds along the day. ``planned_cost`` is the
    grid value of the initial state.
    """
    if len(profile) != HOURS_PER_DAY:
        raise ValueError(f"offline_dp needs a {HOURS_PER_DAY}-hour profile")
    codec = codec or ActionCodec()
    schedule = np.zeros((HOURS_PER_DAY, config.n_microgrids), dtype=int)
    planned = 0.0
    for i in range(config.n_microgrids):
        plan = _MgPlanner(config, i, codec, grid)
        e0 = config.microgrids[i].ess.e_init_kwh
        s = int(plan.soc_index(e0))
        if abs(plan.soc[s] - e0) > 1e-6 * max(1.0, abs(e0)):
            raise ValueError(f"SoC grid of {grid.soc_levels} levels cannot represent e_init={e0}")
        soc, cdg = float(e0), float(config.microgrids[i].cdg.p_min_kw)
        exo = _exo_rows(profile, config, i)
        V, _ = plan.backward(exo)
        planned += float(V[0][s, int(plan.cdg_index(cdg))])
        for t in range(HOURS_PER_DAY):
            a = plan.first_action(soc, cdg, exo[t], V[t + 1])
            schedule[t, i] = a
            _, soc_next, cdg_next = plan.outcomes(soc, cdg, *exo[t])
            n = plan.actions.shape
            soc, cdg = float(np.broadcast_to(soc_next, n)[a]), float(np.broadcast_to(cdg_next, n)[a])
    return schedule, planned


def replay(schedule, profile, config: MgcConfig, codec=None):
    return run_episode(_Replay(schedule), profile, config, codec=codec)


class MpcController:
    """Receding-horizon controller for one day.

    Each hour it observes the true current row, forecasts the next
    ``horizon - 1`` rows, solves the truncated DP with zero terminal
    value and applies the first action only.
    """

    def __init__(self, truth: TimeSeriesProfile, config: MgcConfig, model: ForecastModel = ForecastModel(),
                 horizon: int = 8, grid: DpGrid = DpGrid(), codec=None):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.truth = truth
        self.config = config
        self.model = model
        self.horizon = horizon
        self.codec = codec or ActionCodec()
        self.planners = [_MgPlanner(config, i, self.codec, grid) for i in range(config.n_microgrids)]

    def __call__(self, obs, state: EnvState):
        t = state.hour
        stop = min(t + self.horizon, len(self.truth))
        ahead = forecast_after(self.truth, t, self.model)
        out = np.zeros(self.config.n_microgrids, dtype=int)
        for i, plan in enumerate(self.planners):
            now = exogenous(self.truth, self.config, t, i)
            exo = _exo_rows(ahead, self.config, i, t + 1, stop)
            if exo:
                V, _ = plan.backward(exo)
                V_next = V[0]
            else:
                V_next = np.zeros((len(plan.soc), len(plan.cdg)))
            out[i] = plan.first_action(state.soc_kwh[i], state.prev_cdg_kw[i], now, V_next)
        return out


def mpc(truth: TimeSeriesProfile, config: MgcConfig, model: ForecastModel = ForecastModel(), horizon: int = 8,
        grid: DpGrid = DpGrid(), codec=None):
    return run_episode(MpcController(truth, config, model, horizon, grid, codec), truth, config, codec=codec)


def day_ahead(truth: TimeSeriesProfile, config: MgcConfig, model: ForecastModel = ForecastModel(),
              grid: DpGrid = DpGrid(), codec=None):
    """Plan the whole day once on a forecast, then execute it open loop."""
    predicted = forecast(truth, 1, model, issue_hour=-1)
    schedule, _ = offline_dp(predicted, config, grid, codec)
    return replay(schedule, truth, config, codec)
