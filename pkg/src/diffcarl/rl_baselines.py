"""Reference RL agents (DQN, discrete SAC, DDPG) and policy-agnostic evaluation.

Every learner plugs into :func:`diffcarl.agent.train_offpolicy`, so the
collection, update and evaluation cadence is identical to DiffCarl's.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .agent import (
    LOG_FLOOR,
    Batch,
    Hyperparams,
    ObsScaler,
    QNet,
    choose,
    make_optimizer,
    mlp,
    soft_update,
    train_offpolicy,
)
from .env import ProfileEnvFactory, continuous_to_setpoints, run_episode
from .risk import empirical_cvar

ALGORITHMS = ("dqn", "sac", "ddpg")


@dataclass(frozen=True)
class BaselineSpec:
    """Algorithm tag plus the settings the shared hyperparameters do not cover."""

    algo: str
    hidden: int = 128
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    sac_alpha: float = 0.05
    noise_std: float = 0.1

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}; expected one of {ALGORITHMS}")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0 < self.eps_fraction <= 1:
            raise ValueError("eps_fraction must lie in (0, 1]")
        if self.sac_alpha < 0 or self.noise_std < 0:
            raise ValueError("sac_alpha and noise_std must be non-negative")

    @property
    def continuous(self) -> bool:
        return self.algo == "ddpg"

    def to_dict(self) -> dict:
        return asdict(self)


def _frozen_copy(module):
    tgt = copy.deepcopy(module)
    tgt.requires_grad_(False)
    return tgt


def _step(optimizer, loss) -> float:
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


class DQNLearner:
    """Q-network with a soft-updated target and linearly decaying epsilon-greedy exploration."""

    action_shape = ()
    action_dtype = np.int64

    def __init__(self, obs_dim: int, n_actions: int, hp: Hyperparams, spec: BaselineSpec, seed: int = 0):
        self.hp, self.spec, self.n_actions = hp, spec, n_actions
        torch.manual_seed(seed)
        self.q = QNet(obs_dim, n_actions, spec.hidden)
        self.q_target = _frozen_copy(self.q)
        self.opt = make_optimizer(self.q.parameters(), hp.eta_c, hp.weight_decay)

    def epsilon(self, progress: float) -> float:
        frac = min(1.0, progress / self.spec.eps_fraction)
        return self.spec.eps_start + frac * (self.spec.eps_end - self.spec.eps_start)

    def act(self, obs, rng, greedy: bool, progress: float = 0.0) -> np.ndarray:
        with torch.no_grad():
            q = self.q(torch.as_tensor(np.atleast_2d(obs), dtype=torch.float32)).numpy()
        a = q.argmax(axis=-1)
        if not greedy:
            explore = rng.random(a.shape[0]) < self.epsilon(progress)
            a = np.where(explore, rng.integers(self.n_actions, size=a.shape[0]), a)
        return a

    def target(self, batch: Batch) -> torch.Tensor:
        with torch.no_grad():
            nxt = self.q_target(batch.s2).max(dim=-1).values
        return batch.r + (1.0 - batch.done) * self.hp.gamma * nxt

    def update(self, batch: Batch, rng) -> dict:
        y = self.target(batch)
        q = self.q(batch.s).gather(-1, batch.a.long().unsqueeze(-1)).squeeze(-1)
        loss = _step(self.opt, F.mse_loss(q, y))
        soft_update(self.q, self.q_target, self.hp.tau)
        return {"critic_loss": loss}

    def modules(self) -> dict:
        return {"q": self.q, "q_target": self.q_target}


def soft_state_value(q1, q2, probs, alpha: float):
    """``sum_a pi(a) (min(Q1, Q2)(a) - alpha log pi(a))`` along the last axis."""
    q = torch.minimum(torch.as_tensor(q1), torch.as_tensor(q2))
    probs = torch.as_tensor(probs, dtype=q.dtype)
    return (probs * (q - alpha * torch.log(probs + LOG_FLOOR))).sum(-1)


class SACLearner:
    """Discrete soft actor-critic: categorical actor, twin critics, fixed temperature."""

    action_shape = ()
    action_dtype = np.int64

    def __init__(self, obs_dim: int, n_actions: int, hp: Hyperparams, spec: BaselineSpec, seed: int = 0):
        self.hp, self.spec = hp, spec
        torch.manual_seed(seed)
        self.actor = mlp(obs_dim, n_actions, spec.hidden)
        self.critic1 = QNet(obs_dim, n_actions, spec.hidden)
        self.critic2 = QNet(obs_dim, n_actions, spec.hidden)
        self.critic1_target = _frozen_copy(self.critic1)
        self.critic2_target = _frozen_copy(self.critic2)
        self.actor_opt = make_optimizer(self.actor.parameters(), hp.eta_a, hp.weight_decay)
        self.critic_opt = make_optimizer(
            list(self.critic1.parameters()) + list(self.critic2.parameters()), hp.eta_c, hp.weight_decay
        )

    def probs(self, s: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.actor(s), dim=-1)

    def act(self, obs, rng, greedy: bool, progress: float = 0.0) -> np.ndarray:
        with torch.no_grad():
            p = self.probs(torch.as_tensor(np.atleast_2d(obs), dtype=torch.float32)).numpy()
        return choose(p, rng, greedy)

    def target(self, batch: Batch, probs: Optional[torch.Tensor] = None) -> torch.Tensor:
        with torch.no_grad():
            if probs is None:
                probs = self.probs(batch.s2)
            v = soft_state_value(self.critic1_target(batch.s2), self.critic2_target(batch.s2), probs, self.spec.sac_alpha)
        return batch.r + (1.0 - batch.done) * self.hp.gamma * v

    def update(self, batch: Batch, rng) -> dict:
        y = self.target(batch)
        a = batch.a.long().unsqueeze(-1)
        q1 = self.critic1(batch.s).gather(-1, a).squeeze(-1)
        q2 = self.critic2(batch.s).gather(-1, a).squeeze(-1)
        lc = _step(self.critic_opt, 0.5 * F.mse_loss(q1, y) + 0.5 * F.mse_loss(q2, y))
        with torch.no_grad():
            q = torch.minimum(self.critic1(batch.s), self.critic2(batch.s))
        p = self.probs(batch.s)
        la = _step(self.actor_opt, (p * (self.spec.sac_alpha * torch.log(p + LOG_FLOOR) - q)).sum(-1).mean())
        soft_update(self.critic1, self.critic1_target, self.hp.tau)
        soft_update(self.critic2, self.critic2_target, self.hp.tau)
        return {"critic_loss": lc, "actor_loss": la}

    def modules(self) -> dict:
        return {
            "actor": self.actor,
            "critic1": self.critic1,
            "critic2": self.critic2,
            "critic1_target": self.critic1_target,
            "critic2_target": self.critic2_target,
        }


class _Critic(torch.nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, hidden: int):
        super().__init__()
        self.net = mlp(obs_dim + act_dim, 1, hidden)

    def forward(self, s, a):
        return self.net(torch.cat([s, a], dim=-1)).squeeze(-1)


class DDPGLearner:
    """Deterministic tanh actor on ``[-1, 1]^3`` per microgrid, Gaussian exploration."""

    action_shape = (3,)
    action_dtype = np.float32

    def __init__(self, obs_dim: int, n_actions: int, hp: Hyperparams, spec: BaselineSpec, seed: int = 0):
        self.hp, self.spec = hp, spec
        torch.manual_seed(seed)
        self.actor = torch.nn.Sequential(mlp(obs_dim, 3, spec.hidden), torch.nn.Tanh())
        self.critic = _Critic(obs_dim, 3, spec.hidden)
        self.actor_target = _frozen_copy(self.actor)
        self.critic_target = _frozen_copy(self.critic)
        self.actor_opt = make_optimizer(self.actor.parameters(), hp.eta_a, hp.weight_decay)
        self.critic_opt = make_optimizer(self.critic.parameters(), hp.eta_c, hp.weight_decay)

    def act(self, obs, rng, greedy: bool, progress: float = 0.0) -> np.ndarray:
        with torch.no_grad():
            a = self.actor(torch.as_tensor(np.atleast_2d(obs), dtype=torch.float32)).numpy()
        if not greedy:
            a = np.clip(a + self.spec.noise_std * rng.standard_normal(a.shape), -1.0, 1.0)
        return a.astype(np.float32)

    def update(self, batch: Batch, rng) -> dict:
        with torch.no_grad():
            nxt = self.critic_target(batch.s2, self.actor_target(batch.s2))
            y = batch.r + (1.0 - batch.done) * self.hp.gamma * nxt
        lc = _step(self.critic_opt, F.mse_loss(self.critic(batch.s, batch.a.float()), y))
        la = _step(self.actor_opt, -self.critic(batch.s, self.actor(batch.s)).mean())
        soft_update(self.actor, self.actor_target, self.hp.tau)
        soft_update(self.critic, self.critic_target, self.hp.tau)
        return {"critic_loss": lc, "actor_loss": la}

    def modules(self) -> dict:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }


_LEARNERS = {"dqn": DQNLearner, "sac": SACLearner, "ddpg": DDPGLearner}


def make_baseline(spec: BaselineSpec, obs_dim: int, n_actions: int, hp: Hyperparams, seed: int = 0):
    return _LEARNERS[spec.algo](obs_dim, n_actions, hp, spec, seed)


def _with_mode(factory: Optional[ProfileEnvFactory], continuous: bool):
    if factory is None or factory.continuous == continuous:
        return factory
    return ProfileEnvFactory(factory.profile, factory.config, factory.codec, continuous)


def train_baseline(spec: BaselineSpec, env_factory: ProfileEnvFactory, hp: Hyperparams, seed: int,
                   eval_factory: Optional[ProfileEnvFactory] = None, scaler: Optional[ObsScaler] = None):
    """Train one reference agent; returns ``(learner, learning_curve)``."""
    env_factory = _with_mode(env_factory, spec.continuous)
    eval_factory = _with_mode(eval_factory, spec.continuous)
    env = env_factory.make(0)
    learner = make_baseline(spec, env.obs_dim, env.n_actions, hp, seed)
    curve = train_offpolicy(learner, env_factory, hp, seed, eval_factory, scaler)
    return learner, curve


# --- evaluation ---------------------------------------------------------


class LearnerController:
    """Adapts a learner to the ``controller(obs, state)`` protocol of :func:`run_episode`."""

    def __init__(self, learner, config, scaler: Optional[ObsScaler] = None, greedy: bool = True, profile=None):
        self.learner = learner
        self.config = config
        self.scaler = scaler or ObsScaler()
        self.greedy = greedy
        self.profile = profile
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs, state):
        rows = self.scaler(np.asarray(obs).reshape(self.config.n_microgrids, -1))
        a = self.learner.act(rows, self.rng, greedy=self.greedy)
        if getattr(self.learner, "action_shape", ()) == (3,):
            return continuous_to_setpoints(a, state, self.profile, self.config)
        return a


@dataclass
class DistributionMetrics:
    """Per-day samples plus their summary statistics."""

    per_day: pd.DataFrame
    alpha_cvar: float = 0.95

    def summary(self) -> dict:
        out = {}
        for col in ("cost", "carbon_kg"):
            v = self.per_day[col].to_numpy()
            out[col] = {
                "mean": float(v.mean()),
                "median": float(np.median(v)),
                "std": float(v.std()),
                "max": float(v.max()),
                "cvar": float(empirical_cvar(v, self.alpha_cvar)),
            }
        return out

    def summary_frame(self) -> pd.DataFrame:
        rows = [{"metric": col, **stats} for col, stats in self.summary().items()]
        return pd.DataFrame(rows, columns=["metric", "mean", "median", "std", "max", "cvar"])


def evaluate_policy(policy, test_profile, config, seed: int = 0, alpha_cvar: float = 0.95,
                    scaler: Optional[ObsScaler] = None) -> DistributionMetrics:
    """Greedy rollouts over every day of ``test_profile``.

    ``policy`` is a learner (anything with ``act``) or a factory
    ``policy(day_profile) -> controller`` for schedulers that need the day.
    """
    if test_profile.n_days() < 1:
        raise ValueError("need at least one test day")
    rows = []
    for d, day in enumerate(test_profile.days()):
        if hasattr(policy, "act"):
            controller = LearnerController(policy, config, scaler, greedy=True, profile=day)
        else:
            controller = policy(day)
        m = run_episode(controller, day, config, seed=seed + d)
        rows.append({"day": str(day.timestamps[0].astype("datetime64[D]")), "cost": m.cost, "carbon_kg": m.carbon_kg})
    return DistributionMetrics(pd.DataFrame(rows, columns=["day", "cost", "carbon_kg"]), alpha_cvar)
