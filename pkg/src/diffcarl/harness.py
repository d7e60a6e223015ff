"""Experiment orchestration: configs, scenarios, comparisons and sweeps.

An experiment file is TOML with four sections::

    [env]            scenario = "2mg" | "ieee15" | "ieee33" | "custom"
                     scenario_seed, config (path to an MgcConfig TOML),
                     any scalar MgcConfig field as an override,
                     [env.inventory] loads/pvs/ess/cdgs for "custom"
    [profiles]       source = "synthetic" | "csv"; path; start; n_days;
                     noise_frac; seed; preprocess; test_days
    [algorithms.<tag>]  one table per algorithm with its settings
    [run]            seeds; out; budget = "desk" | "full"; workers

Every output file is a function of the config and the seeds.
"""
from __future__ import annotations

import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
import tomli
import torch

from . import __version__
from .env import ConfigError, MgcConfig, default_config_2mg
from .estimators import (
    DayAheadScheduler,
    DiffCarl,
    MpcScheduler,
    MyopicScheduler,
    OfflineScheduler,
    RLBaseline,
)
from .checkpoint import write_curve
from .profiles import HOURS_PER_DAY, load_csv, nominal_profile, preprocess, split_train_test, synthesize

logger = logging.getLogger(__name__)

LEARNERS = ("diffcarl", "dqn", "sac", "ddpg")
PLANNERS = ("day_ahead", "myopic", "mpc", "offline")
ALGORITHMS = LEARNERS + PLANNERS
RISK_LAMBDAS = (-1.0, -0.1, 0.0, 0.1, 1.0)
CARBON_PRICE = 0.025
BUDGETS = {"desk": {"episodes": 200, "transitions_per_episode": 240}, "full": {"episodes": 2000, "transitions_per_episode": 1000}}
COMPARISON_COLUMNS = ("algorithm", "total_cost", "total_carbon_kg", "improvement_pct")
DISTRIBUTION_COLUMNS = ("seed", "day", "cost", "carbon_kg")


def relative_improvement(c_diffcarl: float, c_comp: float) -> float:
    """Percent cost change of a comparison algorithm against DiffCarl; negative favours DiffCarl."""
    if not c_diffcarl > 0:
        raise ValueError("DiffCarl cost must be positive")
    return (c_diffcarl - c_comp) / c_diffcarl * 100.0


# --- scenarios ----------------------------------------------------------


@dataclass(frozen=True)
class Inventory:
    loads: int
    pvs: int
    ess: int
    cdgs: int

    def __post_init__(self):
        if min(self.loads, self.pvs, self.ess, self.cdgs) < 1:
            raise ConfigError("scenario device counts must be positive")


INVENTORIES = {
    "ieee15": Inventory(loads=10, pvs=2, ess=3, cdgs=2),
    "ieee33": Inventory(loads=26, pvs=5, ess=7, cdgs=5),
}


def _spread(n: int, bins: int, factors: np.ndarray) -> np.ndarray:
    """Sum of per-device factors after assigning ``n`` devices round-robin to ``bins``."""
    out = np.zeros(bins)
    for i in range(n):
        out[i % bins] += factors[i]
    return out


def inventory_config(inv: Inventory, seed: int = 0, base: Optional[MgcConfig] = None) -> MgcConfig:
    """One microgrid per storage or generator unit, device ratings scaled by U[0.8, 1.2].

    Loads and PVs are dealt round-robin; a microgrid without a generator
    gets one rated at 0 kW. Wind is absent in these inventories.
    """
    base = base or MgcConfig()
    template = base.microgrids[0]
    rng = np.random.default_rng(seed)
    n_mg = max(inv.ess, inv.cdgs)
    f_ess = rng.uniform(0.8, 1.2, inv.ess)
    f_cdg = rng.uniform(0.8, 1.2, inv.cdgs)
    load = _spread(inv.loads, n_mg, rng.uniform(0.8, 1.2, inv.loads))
    pv = _spread(inv.pvs, n_mg, rng.uniform(0.8, 1.2, inv.pvs))
    mgs = []
    for i in range(n_mg):
        e = template.ess
        if i < inv.ess:
            f = f_ess[i]
            e = replace(
                e,
                capacity_kwh=e.capacity_kwh * f,
                p_ch_max_kw=e.p_ch_max_kw * f,
                p_dis_max_kw=e.p_dis_max_kw * f,
                e_min_kwh=e.e_min_kwh * f,
                e_max_kwh=e.e_max_kwh * f,
                e_init_kwh=e.e_init_kwh * f,
            )
        c = template.cdg
        if i < inv.cdgs:
            c = replace(c, p_max_kw=c.p_max_kw * f_cdg[i], ramp_max_kw_per_h=c.ramp_max_kw_per_h * f_cdg[i])
        else:
            c = replace(c, p_min_kw=0.0, p_max_kw=0.0)
        mgs.append(replace(template, ess=e, cdg=c, pv_scale=pv[i], wt_scale=0.0, load_scale=load[i]))
    return replace(base, microgrids=tuple(mgs))


def scenario_config(tag: str, seed: int = 0, base: Optional[MgcConfig] = None,
                    inventory: Optional[Inventory] = None) -> MgcConfig:
    if tag == "2mg":
        if base is None:
            return default_config_2mg()
        return base
    if tag in INVENTORIES:
        return inventory_config(INVENTORIES[tag], seed, base)
    if tag == "custom":
        if inventory is None:
            raise ConfigError("scenario 'custom' needs [env.inventory]")
        return inventory_config(inventory, seed, base)
    raise ConfigError(f"unknown scenario {tag!r}")


# --- experiment config --------------------------------------------------

_ENV_SCALARS = ("carbon_price", "carbon_cdg", "carbon_grid", "sell_ratio", "violation_penalty", "reward_scale")
_PROFILE_KEYS = {"source", "path", "start", "n_days", "noise_frac", "seed", "preprocess", "test_days"}
_RUN_KEYS = {"seeds", "out", "budget", "workers"}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "2mg"
    scenario_seed: int = 0
    env_file: Optional[str] = None
    env_overrides: dict = field(default_factory=dict)
    inventory: Optional[Inventory] = None
    profiles: dict = field(default_factory=lambda: {"source": "synthetic"})
    algorithms: dict = field(default_factory=lambda: {"diffcarl": {}, "myopic": {}, "offline": {}})
    seeds: tuple = (0, 1, 2)
    out: str = "results"
    budget: str = "desk"
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("[run] seeds must list at least one seed")
        if self.budget not in BUDGETS:
            raise ConfigError(f"[run] budget must be one of {sorted(BUDGETS)}")
        if self.workers < 1:
            raise ConfigError("[run] workers must be >= 1")
        for tag in self.algorithms:
            if tag not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm [algorithms.{tag}]; expected one of {ALGORITHMS}")
        for key in self.env_overrides:
            if key not in _ENV_SCALARS:
                raise ConfigError(f"unknown [env] key {key!r}")
        unknown = set(self.profiles) - _PROFILE_KEYS
        if unknown:
            raise ConfigError(f"unknown [profiles] keys {sorted(unknown)}")
        if self.profiles.get("source", "synthetic") not in ("synthetic", "csv"):
            raise ConfigError("[profiles] source must be 'synthetic' or 'csv'")
        if self.profiles.get("source") == "csv" and not self.profiles.get("path"):
            raise ConfigError("[profiles] source 'csv' needs a path")

    # construction ------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict, base_dir: Union[str, Path, None] = None) -> "ExperimentConfig":
        doc = dict(doc)
        unknown = set(doc) - {"env", "profiles", "algorithms", "run"}
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")
        env = dict(doc.get("env", {}))
        run = dict(doc.get("run", {}))
        if set(run) - _RUN_KEYS:
            raise ConfigError(f"unknown [run] keys {sorted(set(run) - _RUN_KEYS)}")
        inv = env.pop("inventory", None)
        try:
            inventory = Inventory(**inv) if inv is not None else None
        except TypeError as exc:
            raise ConfigError(f"[env.inventory]: {exc}") from None
        env_file = env.pop("config", None)
        if env_file is not None and base_dir is not None:
            env_file = str((Path(base_dir) / env_file).resolve())
        profiles = dict(doc.get("profiles", {"source": "synthetic"}))
        if profiles.get("path") and base_dir is not None:
            profiles["path"] = str((Path(base_dir) / profiles["path"]).resolve())
        algorithms = {k: dict(v) for k, v in doc.get("algorithms", {"diffcarl": {}, "myopic": {}, "offline": {}}).items()}
        try:
            return cls(
                scenario=env.pop("scenario", "2mg"),
                scenario_seed=int(env.pop("scenario_seed", 0)),
                env_file=env_file,
                env_overrides=env,
                inventory=inventory,
                profiles=profiles,
                algorithms=algorithms,
                seeds=tuple(int(s) for s in run.get("seeds", (0, 1, 2))),
                out=str(run.get("out", "results")),
                budget=run.get("budget", "desk"),
                workers=int(run.get("workers", 1)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def semantic_dict(self) -> dict:
        """Everything that influences results (the output directory does not)."""
        d = asdict(self)
        d.pop("out")
        d.pop("workers")
        if self.env_file:
            d["env_file_content"] = MgcConfig.from_toml(self.env_file).to_dict()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    # resolved objects --------------------------------------------------
    def mgc_config(self) -> MgcConfig:
        base = MgcConfig.from_toml(self.env_file) if self.env_file else None
        cfg = scenario_config(self.scenario, self.scenario_seed, base, self.inventory)
        if self.env_overrides:
            try:
                cfg = cfg.with_(**self.env_overrides)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[env]: {exc}") from None
        return cfg

    def profile_split(self):
        p = self.profiles
        if p.get("source", "synthetic") == "csv":
            profile = load_csv(p["path"])
        else:
            nominal = nominal_profile(p.get("start", "2024-01-01"), int(p.get("n_days", 31)))
            profile = synthesize(nominal, float(p.get("noise_frac", 0.2)), int(p.get("seed", 0)))
        if p.get("preprocess", False):
            profile = preprocess(profile)
        train, test = split_train_test(profile)
        if p.get("test_days"):
            n = int(p["test_days"])
            if not 1 <= n <= test.n_days():
                raise ConfigError(f"[profiles] test_days must lie in 1..{test.n_days()}")
            test = test.slice(0, n * HOURS_PER_DAY)
        return train, test

    def learner_params(self, tag: str) -> dict:
        params = dict(BUDGETS[self.budget])
        params.update(self.algorithms.get(tag, {}))
        return params


def load_experiment(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


# --- cells --------------------------------------------------------------


def make_estimator(tag: str, config: MgcConfig, seed: int, params: dict):
    params = dict(params)
    try:
        if tag == "diffcarl":
            return DiffCarl(config=config, seed=seed, **params)
        if tag in ("dqn", "sac", "ddpg"):
            return RLBaseline(algo=tag, config=config, seed=seed, **params)
        if tag == "myopic":
            return MyopicScheduler(config=config, **params)
        if tag == "offline":
            return OfflineScheduler(config=config, **params)
        if tag == "mpc":
            return MpcScheduler(config=config, forecast_seed=seed, **params)
        if tag == "day_ahead":
            return DayAheadScheduler(config=config, forecast_seed=seed, **params)
    except TypeError as exc:
        raise ConfigError(f"[algorithms.{tag}]: {exc}") from None
    raise ConfigError(f"unknown algorithm {tag!r}")


@dataclass
class CellResult:
    tag: str
    seed: int
    per_day: Optional[pd.DataFrame] = None
    curve: Optional[pd.DataFrame] = None
    error: Optional[str] = None


def run_cell(tag: str, seed: int, config: MgcConfig, params: dict, train, test, train_eval=None) -> CellResult:
    """Fit one (algorithm, seed) cell and evaluate it greedily on ``test``."""
    torch.set_num_threads(1)
    try:
        est = make_estimator(tag, config, seed, params)
        if tag in LEARNERS:
            est.fit(train, eval_X=train_eval if train_eval is not None else test)
        else:
            est.fit(train)
        dist = est.evaluate(test, seed=seed)
        per_day = dist.per_day.assign(seed=seed).loc[:, list(DISTRIBUTION_COLUMNS)]
        curve = getattr(est, "learning_curve_", None)
        return CellResult(tag, seed, per_day, curve)
    except ConfigError:
        raise
    except Exception as exc:  # recorded in the manifest, the rest of the run continues
        logger.exception("cell %s/seed %d failed", tag, seed)
        return CellResult(tag, seed, error=f"{type(exc).__name__}: {exc}")


def _run_cells(jobs, workers: int):
    if workers == 1:
        return [run_cell(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, *job) for job in jobs]
        return [f.result() for f in futures]


# --- outputs ------------------------------------------------------------


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def _manifest(cfg: ExperimentConfig, kind: str, files, failures, extra=None) -> dict:
    doc = {
        "kind": kind,
        "config_hash": cfg.config_hash(),
        "config": cfg.semantic_dict(),
        "seeds": list(cfg.seeds),
        "versions": {
            "diffcarl": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "torch": torch.__version__,
        },
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "files": sorted(str(f) for f in files),
        "failures": failures,
    }
    doc.update(extra or {})
    return doc


def _write_manifest(out: Path, doc: dict) -> Path:
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def comparison_table(per_algo: dict) -> pd.DataFrame:
    """Mean over seeds of total test cost and carbon, plus the improvement column."""
    rows = []
    for tag, df in per_algo.items():
        totals = df.groupby("seed")[["cost", "carbon_kg"]].sum()
        rows.append({"algorithm": tag, "total_cost": totals["cost"].mean(), "total_carbon_kg": totals["carbon_kg"].mean()})
    table = pd.DataFrame(rows, columns=list(COMPARISON_COLUMNS[:-1]))
    ref = table.loc[table.algorithm == "diffcarl", "total_cost"]
    if len(ref):
        table["improvement_pct"] = [relative_improvement(float(ref.iloc[0]), c) for c in table.total_cost]
    else:
        table["improvement_pct"] = np.nan
    return table


def run_comparison(cfg: ExperimentConfig, out: Union[str, Path, None] = None) -> pd.DataFrame:
    """Train/evaluate every listed algorithm for every seed and write the result files."""
    out = Path(out or cfg.out)
    config = cfg.mgc_config()
    train, test = cfg.profile_split()
    jobs = [
        (tag, seed, config, cfg.learner_params(tag) if tag in LEARNERS else cfg.algorithms[tag], train, test)
        for tag in cfg.algorithms
        for seed in cfg.seeds
    ]
    results = _run_cells(jobs, cfg.workers)
    files, failures, per_algo = [], [], {}
    for r in results:
        if r.error:
            failures.append({"algorithm": r.tag, "seed": r.seed, "error": r.error})
            continue
        per_algo.setdefault(r.tag, []).append(r.per_day)
        if r.curve is not None:
            files.append(write_curve(r.curve, out / "curves" / f"{r.tag}_seed{r.seed}.csv"))
    per_algo = {tag: pd.concat(dfs, ignore_index=True) for tag, dfs in per_algo.items()}
    for tag, df in per_algo.items():
        files.append(_write_csv(df, out / "distributions" / f"{tag}.csv"))
    table = comparison_table(per_algo)
    files.append(_write_csv(table, out / "comparison.csv"))
    _write_manifest(out, _manifest(cfg, "compare", [f.relative_to(out) for f in files], failures))
    return table


def _diffcarl_sweep(cfg: ExperimentConfig, out: Path, kind: str, variants: dict, configs: dict,
                    extra: dict) -> pd.DataFrame:
    train, test = cfg.profile_split()
    base = cfg.learner_params("diffcarl")
    files, failures, rows = [], [], []
    for name, changes in variants.items():
        params = {**base, **changes}
        dfs = []
        for seed in cfg.seeds:
            r = run_cell("diffcarl", seed, configs[name], params, train, test)
            if r.error:
                failures.append({"variant": name, "seed": r.seed, "error": r.error})
                continue
            dfs.append(r.per_day)
            files.append(write_curve(r.curve, out / "curves" / f"{name}_seed{seed}.csv"))
        if dfs:
            df = pd.concat(dfs, ignore_index=True)
            files.append(_write_csv(df, out / "distributions" / f"{name}.csv"))
            for seed, g in df.groupby("seed"):
                rows.append({
                    "variant": name,
                    "seed": seed,
                    "mean_cost": g.cost.mean(),
                    "std_cost": g.cost.std(ddof=0),
                    "mean_carbon_kg": g.carbon_kg.mean(),
                })
    summary = pd.DataFrame(rows, columns=["variant", "seed", "mean_cost", "std_cost", "mean_carbon_kg"])
    files.append(_write_csv(summary, out / "summary.csv"))
    _write_manifest(out, _manifest(cfg, kind, [f.relative_to(out) for f in files], failures, extra))
    return summary


def run_risk_sweep(cfg: ExperimentConfig, out: Union[str, Path, None] = None,
                   lambdas=RISK_LAMBDAS) -> pd.DataFrame:
    """DiffCarl per risk weight; one distribution file per lambda."""
    out = Path(out or cfg.out)
    config = cfg.mgc_config()
    variants = {f"lambda_{lam:g}": {"lambda_risk": float(lam)} for lam in lambdas}
    configs = {name: config for name in variants}
    return _diffcarl_sweep(cfg, out, "sweep-risk", variants, configs,
                           {"lambdas": [float(lam) for lam in lambdas]})


def run_carbon_study(cfg: ExperimentConfig, out: Union[str, Path, None] = None,
                     carbon_price: float = CARBON_PRICE) -> pd.DataFrame:
    """Carbon-aware (priced) versus carbon-unaware (price 0) DiffCarl.

    Each variant is trained and evaluated under its own pricing; emissions
    are always recorded, so the two carbon columns are comparable.
    """
    out = Path(out or cfg.out)
    config = cfg.mgc_config()
    configs = {"aware": config.with_(carbon_price=carbon_price), "unaware": config.with_(carbon_price=0.0)}
    variants = {name: {} for name in configs}
    return _diffcarl_sweep(cfg, out, "sweep-carbon", variants, configs,
                           {"carbon_prices": {"aware": carbon_price, "unaware": 0.0}})
