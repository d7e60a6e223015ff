"""Scikit-learn style wrappers: every scheduler and learner is an estimator.

``fit(X)`` takes a training profile (learners train on it, planners
ignore it), ``predict(X)`` returns the hourly action indices chosen on
each day of ``X``, ``evaluate(X)`` the per-day cost/carbon distribution
and ``score(X)`` the negative mean daily cost.
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import schedulers as sch
from .agent import DiffCarlLearner, Hyperparams, ObsScaler, fit_obs_scaler, train_offpolicy
from .checkpoint import load_checkpoint, restore_modules, save_checkpoint
from .codec import ActionCodec
from .env import EpisodeMetrics, MgcConfig, ProfileEnvFactory, default_config_2mg, run_episode
from .profiles import HOURS_PER_DAY, TimeSeriesProfile, from_frame
from .rl_baselines import BaselineSpec, LearnerController, evaluate_policy, make_baseline, train_baseline


def check_profile(X, min_days: int = 1) -> TimeSeriesProfile:
    """Accept a profile or a frame with the CSV columns; require whole days."""
    if isinstance(X, pd.DataFrame):
        X = from_frame(X)
    if not isinstance(X, TimeSeriesProfile):
        raise TypeError(f"expected a TimeSeriesProfile or DataFrame, got {type(X).__name__}")
    if X.n_days() < min_days:
        raise ValueError(f"need at least {min_days} complete day(s), got {X.n_days()}")
    return X


def check_day(X) -> TimeSeriesProfile:
    X = check_profile(X)
    if len(X) != HOURS_PER_DAY:
        raise ValueError(f"expected a single {HOURS_PER_DAY}-hour day, got {len(X)} rows")
    return X


class SchedulerMixin:
    """Shared predict/evaluate/score on top of ``controller(day)``."""

    alpha_cvar = 0.95

    def _config(self) -> MgcConfig:
        return self.config if self.config is not None else default_config_2mg()

    def controller(self, day: TimeSeriesProfile):
        raise NotImplementedError

    def rollout(self, day, seed: int = 0) -> EpisodeMetrics:
        check_is_fitted(self)
        day = check_day(day)
        return run_episode(self.controller(day), day, self.config_, seed=seed)

    def predict(self, X) -> np.ndarray:
        """Action indices, shape ``(n_days * 24, n_microgrids)``."""
        X = check_profile(X)
        return np.concatenate([self.rollout(day, seed=d).actions() for d, day in enumerate(X.days())])

    def evaluate(self, X, seed: int = 0):
        check_is_fitted(self)
        X = check_profile(X)
        return evaluate_policy(self.controller, X, self.config_, seed=seed, alpha_cvar=self.alpha_cvar)

    def score(self, X, y=None) -> float:
        return -float(self.evaluate(X).per_day["cost"].mean())


class MyopicScheduler(SchedulerMixin, BaseEstimator):
    def __init__(self, config: Optional[MgcConfig] = None):
        self.config = config

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.codec_ = ActionCodec()
        return self

    def controller(self, day):
        cfg, codec = self.config_, self.codec_
        return lambda obs, state: sch.myopic(state, day, cfg, codec)


class OfflineScheduler(SchedulerMixin, BaseEstimator):
    """Full-knowledge DP oracle; it sees the whole day it is asked about."""

    def __init__(self, config: Optional[MgcConfig] = None, soc_levels: int = 161):
        self.config = config
        self.soc_levels = soc_levels

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.grid_ = sch.DpGrid(self.soc_levels)
        return self

    def plan(self, day):
        check_is_fitted(self)
        return sch.offline_dp(check_day(day), self.config_, self.grid_)

    def controller(self, day):
        return sch._Replay(self.plan(day)[0])


class _ForecastParams:
    def _model(self) -> sch.ForecastModel:
        return sch.ForecastModel(self.sigma0, self.slope, self.forecast_seed)


class DayAheadScheduler(_ForecastParams, SchedulerMixin, BaseEstimator):
    def __init__(self, config: Optional[MgcConfig] = None, sigma0: float = 0.05, slope: float = 0.15 / 7,
                 forecast_seed: int = 0, soc_levels: int = 161):
        self.config = config
        self.sigma0 = sigma0
        self.slope = slope
        self.forecast_seed = forecast_seed
        self.soc_levels = soc_levels

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.model_ = self._model()
        self.grid_ = sch.DpGrid(self.soc_levels)
        return self

    def controller(self, day):
        predicted = sch.forecast(day, 1, self.model_, issue_hour=-1)
        return sch._Replay(sch.offline_dp(predicted, self.config_, self.grid_)[0])


class MpcScheduler(_ForecastParams, SchedulerMixin, BaseEstimator):
    def __init__(self, config: Optional[MgcConfig] = None, horizon: int = 8, sigma0: float = 0.05,
                 slope: float = 0.15 / 7, forecast_seed: int = 0, soc_levels: int = 161):
        self.config = config
        self.horizon = horizon
        self.sigma0 = sigma0
        self.slope = slope
        self.forecast_seed = forecast_seed
        self.soc_levels = soc_levels

    def fit(self, X=None, y=None):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.config_ = self._config()
        self.model_ = self._model()
        self.grid_ = sch.DpGrid(self.soc_levels)
        return self

    def controller(self, day):
        return sch.MpcController(day, self.config_, self.model_, self.horizon, self.grid_)


# --- learners -----------------------------------------------------------

_HP_FIELDS = tuple(Hyperparams.__dataclass_fields__)


class _LearnerBase(SchedulerMixin):
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(**{k: getattr(self, k) for k in _HP_FIELDS if hasattr(self, k)})

    def _factories(self, X, eval_X):
        cfg = self.config_
        train = ProfileEnvFactory(check_profile(X), cfg)
        evalf = ProfileEnvFactory(check_profile(eval_X), cfg) if eval_X is not None else None
        return train, evalf

    def controller(self, day):
        check_is_fitted(self)
        return LearnerController(self.learner_, self.config_, self.scaler_, greedy=True, profile=day)

    def evaluate(self, X, seed: int = 0):
        check_is_fitted(self)
        X = check_profile(X)
        return evaluate_policy(self.learner_, X, self.config_, seed=seed, alpha_cvar=self.alpha_cvar,
                               scaler=self.scaler_)

    def _manifest(self) -> dict:
        return {
            "estimator": type(self).__name__,
            "params": {k: v for k, v in self.get_params().items() if k != "config"},
            "config": self.config_.to_dict(),
            "scaler": {"mean": self.scaler_.mean.tolist(), "scale": self.scaler_.scale.tolist()},
        }

    def save(self, path: Union[str, Path]) -> Path:
        check_is_fitted(self)
        return save_checkpoint(path, self.learner_.modules(), self._manifest())

    @classmethod
    def load(cls, path: Union[str, Path]):
        arrays, manifest = load_checkpoint(path)
        if manifest.get("estimator") != cls.__name__:
            raise ValueError(f"{path} holds a {manifest.get('estimator')}, not a {cls.__name__}")
        est = cls(config=MgcConfig.from_dict(manifest["config"]), **manifest["params"])
        est.config_ = est.config
        est.learner_ = est._make_learner()
        restore_modules(est.learner_.modules(), arrays)
        sc = manifest["scaler"]
        est.scaler_ = ObsScaler(np.asarray(sc["mean"]), np.asarray(sc["scale"]))
        est.learning_curve_ = None
        return est

    def fit(self, X, y=None, eval_X=None):
        """Train on the days of ``X``; ``eval_X`` days feed the learning curve."""
        self.config_ = self._config()
        train, evalf = self._factories(X, eval_X)
        self.scaler_ = fit_obs_scaler(train)
        self.learner_, self.learning_curve_ = self._train(train, evalf)
        return self


class DiffCarl(_LearnerBase, BaseEstimator):
    """Diffusion-policy scheduler with CVaR-adjusted twin critics."""

    def __init__(
        self,
        config: Optional[MgcConfig] = None,
        eta_a: float = 1e-4,
        eta_c: float = 1e-3,
        tau: float = 5e-3,
        weight_decay: float = 1e-4,
        alpha_ent: float = 0.05,
        lambda_risk: float = 0.1,
        alpha_cvar: float = 0.95,
        gamma: float = 0.95,
        K: int = 10,
        batch_size: int = 256,
        buffer_capacity: int = 1_000_000,
        episodes: int = 2000,
        transitions_per_episode: int = 1000,
        updates_per_episode: int = 1,
        eval_interval: int = 5,
        temperature: float = 1.0,
        hidden: int = 128,
        seed: int = 0,
    ):
        self.config = config
        self.eta_a = eta_a
        self.eta_c = eta_c
        self.tau = tau
        self.weight_decay = weight_decay
        self.alpha_ent = alpha_ent
        self.lambda_risk = lambda_risk
        self.alpha_cvar = alpha_cvar
        self.gamma = gamma
        self.K = K
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.episodes = episodes
        self.transitions_per_episode = transitions_per_episode
        self.updates_per_episode = updates_per_episode
        self.eval_interval = eval_interval
        self.temperature = temperature
        self.hidden = hidden
        self.seed = seed

    def _make_learner(self):
        return DiffCarlLearner(4, ActionCodec().n_actions, self.hyperparams(), self.seed)

    def _manifest(self) -> dict:
        out = super()._manifest()
        sched = self.learner_.schedule
        out["noise_net"] = asdict(self.learner_.params.actor.spec)
        out["schedule"] = {"K": sched.K, "beta_min": sched.beta_min, "beta_max": sched.beta_max}
        return out

    def _train(self, train, evalf):
        learner = self._make_learner()
        curve = train_offpolicy(learner, train, self.hyperparams(), self.seed, evalf, self.scaler_)
        return learner, curve


class RLBaseline(_LearnerBase, BaseEstimator):
    """DQN, discrete SAC or DDPG under the same training cadence as :class:`DiffCarl`."""

    def __init__(
        self,
        algo: str = "dqn",
        config: Optional[MgcConfig] = None,
        eta_a: float = 1e-4,
        eta_c: float = 1e-3,
        tau: float = 5e-3,
        weight_decay: float = 1e-4,
        gamma: float = 0.95,
        batch_size: int = 256,
        buffer_capacity: int = 1_000_000,
        episodes: int = 2000,
        transitions_per_episode: int = 1000,
        updates_per_episode: int = 1,
        eval_interval: int = 5,
        hidden: int = 128,
        eps_start: float = 1.0,
        eps_end: float = 0.05,
        eps_fraction: float = 0.3,
        sac_alpha: float = 0.05,
        noise_std: float = 0.1,
        seed: int = 0,
    ):
        self.algo = algo
        self.config = config
        self.eta_a = eta_a
        self.eta_c = eta_c
        self.tau = tau
        self.weight_decay = weight_decay
        self.gamma = gamma
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.episodes = episodes
        self.transitions_per_episode = transitions_per_episode
        self.updates_per_episode = updates_per_episode
        self.eval_interval = eval_interval
        self.hidden = hidden
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_fraction = eps_fraction
        self.sac_alpha = sac_alpha
        self.noise_std = noise_std
        self.seed = seed

    def spec(self) -> BaselineSpec:
        return BaselineSpec(self.algo, self.hidden, self.eps_start, self.eps_end, self.eps_fraction,
                            self.sac_alpha, self.noise_std)

    def _make_learner(self):
        return make_baseline(self.spec(), 4, ActionCodec().n_actions, self.hyperparams(), self.seed)

    def _train(self, train, evalf):
        return train_baseline(self.spec(), train, self.hyperparams(), self.seed, evalf, self.scaler_)
