"""Grid-connected microgrid community simulator.

Every hour each microgrid chooses ESS, CDG and load-shedding setpoints;
the utility grid closes the power balance. Requested setpoints are
projected onto the feasible set and the clipped amount is penalised.

The arithmetic lives in :func:`project_arrays` and :func:`settle_arrays`,
which broadcast over numpy arrays. ``step`` and the dynamic-programming
schedulers both call them so their costs agree to the last bit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
import tomli
import tomli_w

from .codec import ActionCodec
from .profiles import HOURS_PER_DAY, TimeSeriesProfile

DT_H = 1.0
COST_TERMS = (
    "cdg_fuel",
    "ess_degradation",
    "grid_buy",
    "grid_sell_revenue",
    "shed_penalty",
    "carbon_cost",
    "violation_penalty",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EssParams:
    capacity_kwh: float = 2000.0
    eta_ch: float = 0.9
    eta_dis: float = 0.95
    p_ch_max_kw: float = 200.0
    p_dis_max_kw: float = 200.0
    cost_ch: float = 0.005
    cost_dis: float = 0.005
    e_min_kwh: float = 200.0
    e_max_kwh: float = 1800.0
    e_init_kwh: float = 1000.0

    def __post_init__(self):
        if not (0 < self.eta_ch <= 1 and 0 < self.eta_dis <= 1):
            raise ConfigError("ESS efficiencies must lie in (0, 1]")
        if not (0 <= self.e_min_kwh < self.e_max_kwh <= self.capacity_kwh):
            raise ConfigError("need 0 <= e_min < e_max <= capacity")
        if not (self.e_min_kwh <= self.e_init_kwh <= self.e_max_kwh):
            raise ConfigError("initial storage outside [e_min, e_max]")
        if not (self.p_ch_max_kw > 0 and self.p_dis_max_kw > 0):
            raise ConfigError("ESS power limits must be positive")


@dataclass(frozen=True)
class CdgParams:
    cost_a: float = 0.004
    cost_b: float = 0.066
    cost_c: float = 0.7
    p_min_kw: float = 0.0
    p_max_kw: float = 200.0
    ramp_max_kw_per_h: float = 20.0

    def __post_init__(self):
        if not (0 <= self.p_min_kw <= self.p_max_kw):
            raise ConfigError("need 0 <= p_min <= p_max for the CDG")
        if not self.ramp_max_kw_per_h > 0:
            raise ConfigError("CDG ramp limit must be positive")
        if self.cost_a < 0:
            raise ConfigError("CDG quadratic cost must be non-negative")


@dataclass(frozen=True)
class MicrogridConfig:
    ess: EssParams = field(default_factory=EssParams)
    cdg: CdgParams = field(default_factory=CdgParams)
    shed_max_frac: float = 0.5
    shed_penalty: float = 1.0
    profile_index: int = 0
    pv_scale: float = 1.0
    wt_scale: float = 1.0
    load_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.shed_max_frac <= 1:
            raise ConfigError("shed_max_frac must lie in [0, 1]")
        if self.shed_penalty < 0:
            raise ConfigError("shed_penalty must be non-negative")
        if min(self.pv_scale, self.wt_scale, self.load_scale) < 0:
            raise ConfigError("profile scales must be non-negative")


@dataclass(frozen=True)
class MgcConfig:
    microgrids: tuple = (MicrogridConfig(),)
    carbon_price: float = 0.025
    carbon_cdg: float = 0.9
    carbon_grid: float = 0.412
    sell_ratio: float = 1.0
    violation_penalty: float = 1.0
    reward_scale: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "microgrids", tuple(self.microgrids))
        if not self.microgrids:
            raise ConfigError("at least one microgrid is required")
        if min(self.carbon_price, self.carbon_cdg, self.carbon_grid) < 0:
            raise ConfigError("carbon price and densities must be non-negative")
        if not 0 <= self.sell_ratio <= 1:
            raise ConfigError("sell_ratio must lie in [0, 1]")
        if self.violation_penalty < 0:
            raise ConfigError("violation_penalty must be non-negative")
        if not self.reward_scale > 0:
            raise ConfigError("reward_scale must be positive")

    @property
    def n_microgrids(self) -> int:
        return len(self.microgrids)

    def with_(self, **changes) -> "MgcConfig":
        return replace(self, **changes)

    def subset(self, indices: Sequence[int]) -> "MgcConfig":
        return replace(self, microgrids=tuple(self.microgrids[i] for i in indices))

    def params(self, mg: Optional[int] = None) -> dict:
        """Device parameters as numpy arrays over microgrids (or scalars for one)."""
        mgs = self.microgrids if mg is None else (self.microgrids[mg],)
        out = {
            "eta_ch": [m.ess.eta_ch for m in mgs],
            "eta_dis": [m.ess.eta_dis for m in mgs],
            "p_ch_max": [m.ess.p_ch_max_kw for m in mgs],
            "p_dis_max": [m.ess.p_dis_max_kw for m in mgs],
            "cost_ch": [m.ess.cost_ch for m in mgs],
            "cost_dis": [m.ess.cost_dis for m in mgs],
            "e_min": [m.ess.e_min_kwh for m in mgs],
            "e_max": [m.ess.e_max_kwh for m in mgs],
            "a": [m.cdg.cost_a for m in mgs],
            "b": [m.cdg.cost_b for m in mgs],
            "c": [m.cdg.cost_c for m in mgs],
            "p_min": [m.cdg.p_min_kw for m in mgs],
            "p_max": [m.cdg.p_max_kw for m in mgs],
            "ramp": [m.cdg.ramp_max_kw_per_h for m in mgs],
            "shed_max": [m.shed_max_frac for m in mgs],
            "shed_penalty": [m.shed_penalty for m in mgs],
        }
        out = {k: np.asarray(v, dtype=float) for k, v in out.items()}
        if mg is not None:
            out = {k: v[0] for k, v in out.items()}
        for k in ("carbon_price", "carbon_cdg", "carbon_grid", "sell_ratio", "violation_penalty"):
            out[k] = float(getattr(self, k))
        return out

    # serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["microgrids"] = [asdict(m) for m in self.microgrids]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MgcConfig":
        d = dict(d)
        try:
            mgs = []
            for m in d.pop("microgrids", [{}]):
                m = dict(m)
                ess = EssParams(**m.pop("ess", {}))
                cdg = CdgParams(**m.pop("cdg", {}))
                mgs.append(MicrogridConfig(ess=ess, cdg=cdg, **m))
            return cls(microgrids=tuple(mgs), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_toml(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(tomli_w.dumps(self.to_dict()).encode())

    @classmethod
    def from_toml(cls, path: Union[str, Path]) -> "MgcConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))


def default_config_2mg() -> MgcConfig:
    """Two microgrids with the reference device parameters.

    The second microgrid is wind-heavy and carries a larger load so the
    two are not exact copies when fed from one profile.
    """
    mg_a = MicrogridConfig(pv_scale=1.0, wt_scale=0.5, load_scale=1.0)
    mg_b = MicrogridConfig(pv_scale=0.5, wt_scale=1.5, load_scale=1.2)
    return MgcConfig(microgrids=(mg_a, mg_b))


@dataclass(frozen=True)
class EnvState:
    hour: int
    soc_kwh: tuple
    prev_cdg_kw: tuple

    def __post_init__(self):
        object.__setattr__(self, "soc_kwh", tuple(float(x) for x in self.soc_kwh))
        object.__setattr__(self, "prev_cdg_kw", tuple(float(x) for x in self.prev_cdg_kw))


def initial_state(config: MgcConfig) -> EnvState:
    return EnvState(
        0,
        tuple(m.ess.e_init_kwh for m in config.microgrids),
        tuple(m.cdg.p_min_kw for m in config.microgrids),
    )


@dataclass(frozen=True)
class ActionSetpoints:
    """Per-microgrid setpoints in kW; ``p_ess > 0`` discharges."""

    p_ess_kw: tuple
    p_cdg_kw: tuple
    p_ls_kw: tuple

    def __post_init__(self):
        for name in ("p_ess_kw", "p_cdg_kw", "p_ls_kw"):
            object.__setattr__(self, name, tuple(float(x) for x in np.atleast_1d(getattr(self, name))))

    def arrays(self):
        return (np.asarray(self.p_ess_kw), np.asarray(self.p_cdg_kw), np.asarray(self.p_ls_kw))


@dataclass(frozen=True, eq=False)
class StepResult:
    next_state: EnvState
    observation: np.ndarray
    reward: float
    cost_total: float
    breakdown: dict
    carbon_kg: float
    grid_exchange_kw: np.ndarray
    clipped: bool
    clipped_energy_kwh: float
    applied: ActionSetpoints
    cost_by_mg: np.ndarray
    carbon_by_mg: np.ndarray


# --- broadcasting kernel -------------------------------------------------


def exogenous(profiles, config: MgcConfig, hour: int, mg: Optional[int] = None):
    """Load, renewable output and price at ``hour`` for each microgrid."""
    profiles = _as_profiles(profiles)
    mgs = config.microgrids if mg is None else (config.microgrids[mg],)
    load, rdg, price = [], [], []
    for m in mgs:
        p = profiles[m.profile_index]
        load.append(m.load_scale * p.load_kw[hour])
        rdg.append(m.pv_scale * p.pv_kw[hour] + m.wt_scale * p.wt_kw[hour])
        price.append(p.price[hour])
    out = np.array(load), np.array(rdg), np.array(price)
    if mg is not None:
        out = tuple(x[0] for x in out)
    return out


def project_arrays(p_ess, p_cdg, p_ls, soc, prev_cdg, load, P):
    """Clamp setpoints onto the feasible set; returns (ess, cdg, ls, clipped_kwh)."""
    lo_c = np.maximum(P["p_min"], prev_cdg - P["ramp"] * DT_H)
    hi_c = np.minimum(P["p_max"], prev_cdg + P["ramp"] * DT_H)
    cdg = np.clip(p_cdg, lo_c, np.maximum(lo_c, hi_c))
    ls = np.clip(p_ls, 0.0, P["shed_max"] * load)
    max_ch = np.minimum(P["p_ch_max"], np.maximum(P["e_max"] - soc, 0.0) / (P["eta_ch"] * DT_H))
    max_dis = np.minimum(P["p_dis_max"], np.maximum(soc - P["e_min"], 0.0) * P["eta_dis"] / DT_H)
    ess = np.clip(p_ess, -max_ch, max_dis)
    clipped = (np.abs(p_ess - ess) + np.abs(p_cdg - cdg) + np.abs(p_ls - ls)) * DT_H
    return ess, cdg, ls, clipped


def settle_arrays(ess, cdg, ls, soc, load, rdg, price, clipped, P):
    """Apply feasible setpoints: next SoC, grid exchange and every cost term."""
    charge = np.maximum(-ess, 0.0)
    discharge = np.maximum(ess, 0.0)
    soc_next = soc + P["eta_ch"] * charge * DT_H - discharge / P["eta_dis"] * DT_H
    soc_next = np.clip(soc_next, P["e_min"], P["e_max"])
    p_ex = (load - ls) - rdg - cdg - ess
    buy = np.maximum(p_ex, 0.0)
    sell = np.maximum(-p_ex, 0.0)
    terms = {
        "cdg_fuel": (P["a"] * cdg * cdg + P["b"] * cdg + np.where(cdg > 0, P["c"], 0.0)) * DT_H,
        "ess_degradation": (P["cost_ch"] * charge + P["cost_dis"] * discharge) * DT_H,
        "grid_buy": price * buy * DT_H,
        "grid_sell_revenue": P["sell_ratio"] * price * sell * DT_H,
        "shed_penalty": P["shed_penalty"] * ls * DT_H,
    }
    carbon = (P["carbon_cdg"] * cdg + P["carbon_grid"] * buy) * DT_H
    terms["carbon_cost"] = P["carbon_price"] * carbon
    terms["violation_penalty"] = P["violation_penalty"] * clipped
    total = (
        terms["cdg_fuel"]
        + terms["ess_degradation"]
        + terms["grid_buy"]
        - terms["grid_sell_revenue"]
        + terms["shed_penalty"]
        + terms["carbon_cost"]
        + terms["violation_penalty"]
    )
    return soc_next, p_ex, terms, carbon, total


# --- public operations ---------------------------------------------------


def _as_profiles(profiles) -> Sequence[TimeSeriesProfile]:
    if isinstance(profiles, TimeSeriesProfile):
        return (profiles,)
    return tuple(profiles)


def horizon(profiles) -> int:
    return min(len(p) for p in _as_profiles(profiles))


def observe(state: EnvState, profiles, config: MgcConfig) -> np.ndarray:
    """``[load, rdg, price, soc_normalized]`` per microgrid, concatenated."""
    if not 0 <= state.hour < horizon(profiles):
        raise IndexError(f"hour {state.hour} outside profile horizon {horizon(profiles)}")
    return observation_rows(state.hour, np.asarray(state.soc_kwh), profiles, config).ravel()


def observation_rows(hour, soc, profiles, config) -> np.ndarray:
    load, rdg, price = exogenous(profiles, config, hour)
    P = config.params()
    soc_n = (np.asarray(soc, dtype=float) - P["e_min"]) / (P["e_max"] - P["e_min"])
    return np.stack([load, rdg, price, soc_n], axis=-1)


def as_setpoints(action, state: EnvState, profiles, config: MgcConfig, codec: Optional[ActionCodec] = None):
    """Turn a controller output (setpoints or codec indices) into setpoints."""
    if isinstance(action, ActionSetpoints):
        return action
    codec = codec or ActionCodec()
    idx = np.atleast_1d(np.asarray(action))
    if idx.dtype.kind not in "iu":
        if idx.dtype.kind == "f" and np.all(np.isfinite(idx)) and np.all(idx == np.round(idx)):
            idx = idx.astype(int)
        else:
            raise ValueError(f"cannot interpret action {action!r}")
    if idx.shape != (config.n_microgrids,):
        raise ValueError(
            f"expected {config.n_microgrids} action indices (one per microgrid), got shape {idx.shape}"
        )
    load, _, _ = exogenous(profiles, config, state.hour)
    P = config.params()
    return ActionSetpoints(*codec.decode(idx, load, P["p_ch_max"], P["p_dis_max"], P["p_max"]))


def project_feasible(requested: ActionSetpoints, state: EnvState, profiles, config: MgcConfig):
    """Projected setpoints and the total clipped energy (kWh)."""
    load, _, _ = exogenous(profiles, config, state.hour)
    ess, cdg, ls, clipped = project_arrays(
        *requested.arrays(),
        np.asarray(state.soc_kwh),
        np.asarray(state.prev_cdg_kw),
        load,
        config.params(),
    )
    return ActionSetpoints(ess, cdg, ls), float(clipped.sum())


def step(state: EnvState, action, profiles, config: MgcConfig, codec: Optional[ActionCodec] = None) -> StepResult:
    """Advance one hour. ``action`` is :class:`ActionSetpoints` or codec indices."""
    H = horizon(profiles)
    if not 0 <= state.hour < H:
        raise IndexError(f"hour {state.hour} outside profile horizon {H}")
    requested = as_setpoints(action, state, profiles, config, codec)
    if not all(math.isfinite(x) for x in requested.p_ess_kw + requested.p_cdg_kw + requested.p_ls_kw):
        raise ValueError(f"non-finite setpoints at hour {state.hour}")
    P = config.params()
    load, rdg, price = exogenous(profiles, config, state.hour)
    soc = np.asarray(state.soc_kwh)
    ess, cdg, ls, clipped = project_arrays(
        *requested.arrays(), soc, np.asarray(state.prev_cdg_kw), load, P
    )
    soc_next, p_ex, terms, carbon, total = settle_arrays(ess, cdg, ls, soc, load, rdg, price, clipped, P)
    nxt = EnvState(state.hour + 1, soc_next, cdg)
    obs_hour = min(nxt.hour, H - 1)
    obs = observation_rows(obs_hour, soc_next, profiles, config).ravel()
    cost_total = float(total.sum())
    return StepResult(
        next_state=nxt,
        observation=obs,
        reward=-cost_total / config.reward_scale,
        cost_total=cost_total,
        breakdown={k: float(v.sum()) for k, v in terms.items()},
        carbon_kg=float(carbon.sum()),
        grid_exchange_kw=p_ex,
        clipped=bool(np.any(clipped > 0)),
        clipped_energy_kwh=float(clipped.sum()),
        applied=ActionSetpoints(ess, cdg, ls),
        cost_by_mg=total,
        carbon_by_mg=carbon,
    )


# --- episodes -----------------------------------------------------------


@dataclass(eq=False)
class EpisodeMetrics:
    cost: float
    carbon_kg: float
    violations: float
    traces: pd.DataFrame

    @property
    def reward(self) -> float:
        return float(self.traces["reward"].sum())

    def actions(self) -> np.ndarray:
        cols = [c for c in self.traces.columns if c.startswith("action_mg")]
        return self.traces[cols].to_numpy() if cols else np.empty((len(self.traces), 0))

    def to_csv(self, path: Union[str, Path]) -> None:
        df = self.traces.copy()
        df["hour"] = df["hour"].astype(str)
        totals = {c: df[c].sum() for c in df.columns if c in _ADDITIVE}
        totals["hour"] = "total"
        df = pd.concat([df, pd.DataFrame([totals], columns=df.columns)], ignore_index=True)
        df.to_csv(path, index=False, float_format="%.10g")


_ADDITIVE = set(COST_TERMS) | {"cost_total", "carbon_kg", "clipped_kwh", "reward"}

Controller = Callable[[np.ndarray, EnvState], object]


def run_episode(
    controller: Controller,
    profile,
    config: MgcConfig,
    seed: int = 0,
    codec: Optional[ActionCodec] = None,
    state: Optional[EnvState] = None,
) -> EpisodeMetrics:
    """Roll one 24-hour day from the initial storage levels.

    ``controller(observation, state)`` returns setpoints or codec indices.
    Controllers exposing ``reset(seed)`` are reset first, so a seeded
    stochastic controller replays identically.
    """
    profiles = _as_profiles(profile)
    if horizon(profiles) != HOURS_PER_DAY:
        raise ValueError(f"episode profile must have {HOURS_PER_DAY} rows")
    if hasattr(controller, "reset"):
        controller.reset(seed)
    state = state or initial_state(config)
    rows = []
    for h in range(HOURS_PER_DAY):
        obs = observe(state, profiles, config)
        action = controller(obs, state)
        try:
            res = step(state, action, profiles, config, codec)
        except ValueError as exc:
            raise ValueError(f"controller output rejected at hour {h}: {exc}") from None
        rows.append(_trace_row(h, action, state, res))
        state = res.next_state
    traces = pd.DataFrame(rows)
    return EpisodeMetrics(
        cost=float(traces["cost_total"].sum()),
        carbon_kg=float(traces["carbon_kg"].sum()),
        violations=float(traces["clipped_kwh"].sum()),
        traces=traces,
    )


def _trace_row(h, action, state, res: StepResult) -> dict:
    row = {"hour": h, "cost_total": res.cost_total}
    row.update(res.breakdown)
    row["carbon_kg"] = res.carbon_kg
    row["clipped_kwh"] = res.clipped_energy_kwh
    row["reward"] = res.reward
    if not isinstance(action, ActionSetpoints):
        for i, a in enumerate(np.atleast_1d(action)):
            row[f"action_mg{i}"] = int(a)
    for i in range(len(state.soc_kwh)):
        row[f"p_ess_mg{i}"] = res.applied.p_ess_kw[i]
        row[f"p_cdg_mg{i}"] = res.applied.p_cdg_kw[i]
        row[f"p_ls_mg{i}"] = res.applied.p_ls_kw[i]
        row[f"p_ex_mg{i}"] = float(res.grid_exchange_kw[i])
        row[f"soc_mg{i}"] = res.next_state.soc_kwh[i]
    return row


# --- learner-facing view ------------------------------------------------


class DayEnv:
    """One day seen as ``n_agents`` parallel per-microgrid decision problems.

    Observations are ``(n_agents, 4)`` rows; rewards are per-microgrid
    ``-cost / reward_scale``. ``continuous=True`` accepts ``(n_agents, 3)``
    actions in ``[-1, 1]`` mapped linearly onto the device ranges.
    """

    obs_dim = 4

    def __init__(self, profile, config: MgcConfig, codec: Optional[ActionCodec] = None, continuous: bool = False):
        self.profiles = _as_profiles(profile)
        self.config = config
        self.codec = codec or ActionCodec()
        self.continuous = continuous
        self.n_agents = config.n_microgrids
        self.n_actions = self.codec.n_actions
        self.horizon = horizon(self.profiles)
        self.state = initial_state(config)

    def reset(self) -> np.ndarray:
        self.state = initial_state(self.config)
        return observation_rows(0, self.state.soc_kwh, self.profiles, self.config)

    def step(self, actions):
        if self.continuous:
            actions = continuous_to_setpoints(actions, self.state, self.profiles, self.config)
        res = step(self.state, actions, self.profiles, self.config, self.codec)
        self.state = res.next_state
        done = self.state.hour >= self.horizon
        obs = res.observation.reshape(self.n_agents, self.obs_dim)
        return obs, -res.cost_by_mg / self.config.reward_scale, done, res


def continuous_to_setpoints(actions, state: EnvState, profiles, config: MgcConfig) -> ActionSetpoints:
    a = np.clip(np.asarray(actions, dtype=float).reshape(config.n_microgrids, 3), -1.0, 1.0)
    P = config.params()
    load, _, _ = exogenous(profiles, config, state.hour)
    u = (a + 1.0) / 2.0
    p_ess = -P["p_ch_max"] + u[:, 0] * (P["p_ch_max"] + P["p_dis_max"])
    p_cdg = P["p_min"] + u[:, 1] * (P["p_max"] - P["p_min"])
    p_ls = u[:, 2] * P["shed_max"] * load
    return ActionSetpoints(p_ess, p_cdg, p_ls)


class ProfileEnvFactory:
    """Hands out :class:`DayEnv` instances for days of a profile."""

    def __init__(self, profile: TimeSeriesProfile, config: MgcConfig, codec=None, continuous=False):
        if profile.n_days() < 1:
            raise ValueError("profile holds no complete day")
        self.profile = profile
        self.config = config
        self.codec = codec or ActionCodec()
        self.continuous = continuous

    @property
    def n_days(self) -> int:
        return self.profile.n_days()

    def make(self, day: int) -> DayEnv:
        return DayEnv(self.profile.day(day), self.config, self.codec, self.continuous)

    def sample(self, rng: np.random.Generator) -> DayEnv:
        return self.make(int(rng.integers(self.n_days)))
