"""DiffCarl learner: diffusion actor, twin risk-sensitive critics, training loop.

The training loop in :func:`train_offpolicy` is shared with the reference
RL agents in :mod:`diffcarl.rl_baselines`; only the learner differs.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import torch
from torch import nn

from .env import observation_rows
from .diffusion import DiffusionSchedule, NoiseNet, NoiseNetSpec, build_schedule, sample_policy
from .risk import cvar_lower, cvar_upper

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CURVE_COLUMNS = ("episode", "steps", "mean_test_reward", "mean_test_cost", "mean_test_carbon")


@dataclass
class Hyperparams:
    """Training settings; defaults are the reference values.

    ``updates_per_episode`` gradient steps follow each collection round
    (the reference loop uses one).
    """

    eta_a: float = 1e-4
    eta_c: float = 1e-3
    tau: float = 5e-3
    weight_decay: float = 1e-4
    alpha_ent: float = 0.05
    lambda_risk: float = 0.1
    alpha_cvar: float = 0.95
    gamma: float = 0.95
    K: int = 10
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    episodes: int = 2000
    transitions_per_episode: int = 1000
    updates_per_episode: int = 1
    eval_interval: int = 5
    beta_min: float = 0.1
    beta_max: float = 10.0
    temperature: float = 1.0
    hidden: int = 128

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.alpha_cvar < 1:
            raise ValueError("alpha_cvar must lie in (0, 1)")
        if not 0 < self.batch_size <= self.buffer_capacity:
            raise ValueError("need 0 < batch_size <= buffer_capacity")
        if self.episodes < 0 or self.transitions_per_episode < 1:
            raise ValueError("episodes must be >= 0 and transitions_per_episode >= 1")
        if self.updates_per_episode < 1 or self.eval_interval < 1:
            raise ValueError("updates_per_episode and eval_interval must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# --- replay buffer ------------------------------------------------------


@dataclass
class Batch:
    s: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s2: torch.Tensor
    done: torch.Tensor

    def __len__(self) -> int:
        return self.s.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transitions are overwritten first."""

    def __init__(self, capacity: int, obs_dim: int, action_shape=(), action_dtype=np.int64):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, obs_dim), dtype=np.float32)
        self.s2 = np.zeros((self.capacity, obs_dim), dtype=np.float32)
        self.a = np.zeros((self.capacity,) + tuple(action_shape), dtype=action_dtype)
        self.r = np.zeros(self.capacity, dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=np.float32)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        s = np.atleast_2d(s)
        n = s.shape[0]
        idx = (self._next + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = np.asarray(a).reshape((n,) + self.a.shape[1:])
        self.r[idx] = np.broadcast_to(r, (n,))
        self.s2[idx] = np.atleast_2d(s2)
        self.done[idx] = np.broadcast_to(np.asarray(done, dtype=np.float32), (n,))
        self._next = (self._next + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return Batch(
            torch.from_numpy(self.s[idx]),
            torch.from_numpy(self.a[idx]),
            torch.from_numpy(self.r[idx]),
            torch.from_numpy(self.s2[idx]),
            torch.from_numpy(self.done[idx]),
        )


# --- networks -----------------------------------------------------------


def mlp(n_in: int, n_out: int, hidden: int = 128) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(n_in, hidden), nn.Mish(), nn.Linear(hidden, hidden), nn.Mish(), nn.Linear(hidden, n_out)
    )


class QNet(nn.Module):
    """Observation -> one Q-value per discrete action."""

    def __init__(self, obs_dim: int = 4, n_actions: int = 45, hidden: int = 128):
        super().__init__()
        self.net = mlp(obs_dim, n_actions, hidden)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.net(s)


@dataclass(eq=False)
class AgentParams:
    actor: NoiseNet
    critic1: QNet
    critic2: QNet
    actor_target: NoiseNet = None
    critic1_target: QNet = None
    critic2_target: QNet = None

    def __post_init__(self):
        for name in ("actor", "critic1", "critic2"):
            if getattr(self, name + "_target") is None:
                tgt = copy.deepcopy(getattr(self, name))
                tgt.requires_grad_(False)
                setattr(self, name + "_target", tgt)

    @classmethod
    def init(cls, obs_dim=4, n_actions=45, hidden=128, seed=0, dtype=torch.float32) -> "AgentParams":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            actor = NoiseNet(NoiseNetSpec(obs_dim=obs_dim, n_actions=n_actions, hidden=hidden)).to(dtype)
            c1 = QNet(obs_dim, n_actions, hidden).to(dtype)
            c2 = QNet(obs_dim, n_actions, hidden).to(dtype)
        finally:
            torch.random.set_rng_state(gen_state)
        return cls(actor, c1, c2)

    def online(self):
        return (self.actor, self.critic1, self.critic2)

    def targets(self):
        return (self.actor_target, self.critic1_target, self.critic2_target)


def soft_update(online: nn.Module, target: nn.Module, tau: float) -> nn.Module:
    """In place: ``target <- tau * online + (1 - tau) * target``."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    with torch.no_grad():
        for po, pt in zip(online.parameters(), target.parameters()):
            if po.shape != pt.shape:
                raise ValueError(f"shape mismatch {tuple(po.shape)} vs {tuple(pt.shape)}")
            pt.mul_(1.0 - tau).add_(po, alpha=tau)
    return target


# --- targets ------------------------------------------------------------


def value_atoms(s2, params: AgentParams, schedule: DiffusionSchedule, hp: Hyperparams, rng, probs=None):
    """Next-state atoms ``min(Q1', Q2') - alpha_ent * log pi'`` and their weights ``pi'``."""
    s2 = torch.as_tensor(s2)
    with torch.no_grad():
        if probs is None:
            probs = sample_policy(s2, params.actor_target, schedule, rng, hp.temperature).probs
        probs = torch.as_tensor(probs, dtype=s2.dtype)
        q = torch.minimum(params.critic1_target(s2), params.critic2_target(s2))
        values = q - hp.alpha_ent * torch.log(probs + LOG_FLOOR)
    return values.numpy().astype(float), probs.numpy().astype(float)


def risk_adjusted_continuation(values, probs, hp: Hyperparams):
    """Blend of the mean and a CVaR tail, steered by ``lambda_risk``.

    ``lambda >= 0`` moves toward the lower tail (risk-averse; 1 gives the
    pure lower CVaR), ``lambda < 0`` toward the upper tail.
    """
    probs = np.asarray(probs, dtype=float)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    values = np.asarray(values, dtype=float)
    m = (probs * values).sum(axis=-1)
    lam = hp.lambda_risk
    if lam == 0:
        return m
    if lam > 0:
        return m - lam * (m - cvar_lower(values, probs, hp.alpha_cvar))
    return m + abs(lam) * (cvar_upper(values, probs, hp.alpha_cvar) - m)


def risk_adjusted_target(r, done, values, probs, hp: Hyperparams):
    """``y = r + (1 - done) * gamma * V``."""
    V = risk_adjusted_continuation(values, probs, hp)
    out = np.asarray(r, dtype=float) + (1.0 - np.asarray(done, dtype=float)) * hp.gamma * V
    return float(out) if np.ndim(out) == 0 else out


# --- gradient steps -----------------------------------------------------


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def critic_loss(batch: Batch, params: AgentParams, y: torch.Tensor) -> torch.Tensor:
    a = batch.a.long().unsqueeze(-1)
    q1 = params.critic1(batch.s).gather(-1, a).squeeze(-1)
    q2 = params.critic2(batch.s).gather(-1, a).squeeze(-1)
    return 0.5 * ((q1 - y) ** 2).mean() + 0.5 * ((q2 - y) ** 2).mean()


def critic_update(batch: Batch, params: AgentParams, schedule, hp: Hyperparams, optimizer, rng) -> float:
    """One AdamW step on both critics toward the risk-adjusted target."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    values, probs = value_atoms(batch.s2, params, schedule, hp, rng)
    y = risk_adjusted_target(batch.r.numpy(), batch.done.numpy(), values, probs, hp)
    y = torch.as_tensor(np.atleast_1d(y), dtype=batch.s.dtype)
    loss = critic_loss(batch, params, y)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def actor_loss(s, params: AgentParams, schedule, hp: Hyperparams, rng) -> torch.Tensor:
    """``-mean(pi^T Q_risk + alpha_ent H(pi))`` through the reparameterised chain."""
    dist = sample_policy(s, params.actor, schedule, rng, hp.temperature)
    with torch.no_grad():
        q = torch.minimum(params.critic1(s), params.critic2(s))
    p = dist.probs
    entropy = -(p * torch.log(p + LOG_FLOOR)).sum(-1)
    return -((p * q).sum(-1) + hp.alpha_ent * entropy).mean()


def actor_update(batch: Batch, params: AgentParams, schedule, hp: Hyperparams, optimizer, rng) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss = actor_loss(batch.s, params, schedule, hp, rng)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# --- acting -------------------------------------------------------------


def choose(probs: np.ndarray, rng: np.random.Generator, greedy: bool) -> np.ndarray:
    """Argmax (lowest index on ties) or one categorical draw per row."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    if greedy:
        return probs.argmax(axis=-1)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), probs.shape[1] - 1)


def act(s, params: AgentParams, schedule, rng, greedy: bool = False, temperature: float = 1.0, probs=None):
    """Action index for each observation row."""
    s = torch.as_tensor(np.atleast_2d(s), dtype=torch.float32)
    if probs is None:
        with torch.no_grad():
            probs = sample_policy(s, params.actor, schedule, rng, temperature).probs.numpy()
    return choose(probs, rng, greedy)


# --- observation scaling ------------------------------------------------


@dataclass
class ObsScaler:
    """Per-feature standardisation fitted on training observations."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    scale: np.ndarray = field(default_factory=lambda: np.ones(4))

    @classmethod
    def fit(cls, obs: np.ndarray) -> "ObsScaler":
        obs = np.asarray(obs, dtype=float)
        std = obs.std(axis=0)
        return cls(obs.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    def __call__(self, obs) -> np.ndarray:
        return ((np.asarray(obs, dtype=float) - self.mean) / self.scale).astype(np.float32)


def fit_obs_scaler(env_factory) -> ObsScaler:
    """Scaler over the exogenous features of every training day; SoC is kept as is."""
    rows = []
    for d in range(env_factory.n_days):
        env = env_factory.make(d)
        for h in range(env.horizon):
            rows.append(observation_rows(h, env.state.soc_kwh, env.profiles, env.config))
    obs = np.concatenate(rows)
    sc = ObsScaler.fit(obs)
    sc.mean[-1], sc.scale[-1] = 0.0, 1.0
    return sc


# --- shared off-policy loop ---------------------------------------------


class DiffCarlLearner:
    """Diffusion actor plus twin critics with CVaR-adjusted targets."""

    action_shape = ()
    action_dtype = np.int64

    def __init__(self, obs_dim: int, n_actions: int, hp: Hyperparams, seed: int = 0):
        self.hp = hp
        self.schedule = build_schedule(hp.K, hp.beta_min, hp.beta_max)
        self.params = AgentParams.init(obs_dim, n_actions, hp.hidden, seed)
        self.actor_opt = make_optimizer(self.params.actor.parameters(), hp.eta_a, hp.weight_decay)
        self.critic_opt = make_optimizer(
            list(self.params.critic1.parameters()) + list(self.params.critic2.parameters()),
            hp.eta_c,
            hp.weight_decay,
        )

    def act(self, obs: np.ndarray, rng, greedy: bool, progress: float = 0.0) -> np.ndarray:
        return act(obs, self.params, self.schedule, rng, greedy, self.hp.temperature)

    def update(self, batch: Batch, rng) -> dict:
        lc = critic_update(batch, self.params, self.schedule, self.hp, self.critic_opt, rng)
        la = actor_update(batch, self.params, self.schedule, self.hp, self.actor_opt, rng)
        for on, tg in zip(self.params.online(), self.params.targets()):
            soft_update(on, tg, self.hp.tau)
        return {"critic_loss": lc, "actor_loss": la}

    def modules(self) -> dict:
        p = self.params
        return {
            "actor": p.actor,
            "critic1": p.critic1,
            "critic2": p.critic2,
            "actor_target": p.actor_target,
            "critic1_target": p.critic1_target,
            "critic2_target": p.critic2_target,
        }


def collect(learner, env_factory, n_steps: int, rng, scaler, buffer: ReplayBuffer, progress: float = 0.0):
    """Roll ``n_steps`` environment steps with the stochastic policy into ``buffer``.

    Days are sampled from the factory and stepped in lockstep so one
    policy call serves all of them.
    """
    horizon = env_factory.make(0).horizon
    n_envs = math.ceil(n_steps / horizon)
    lengths = [horizon] * (n_envs - 1) + [n_steps - horizon * (n_envs - 1)]
    envs = [env_factory.sample(rng) for _ in range(n_envs)]
    obs = [e.reset() for e in envs]
    for h in range(horizon):
        live = [i for i in range(n_envs) if lengths[i] > h]
        if not live:
            break
        stacked = np.concatenate([scaler(obs[i]) for i in live])
        actions = learner.act(stacked, rng, greedy=False, progress=progress)
        n_ag = envs[0].n_agents
        for j, i in enumerate(live):
            a = actions[j * n_ag : (j + 1) * n_ag]
            nxt, rew, done, _ = envs[i].step(a)
            buffer.add(scaler(obs[i]), a, rew, scaler(nxt), float(done))
            obs[i] = nxt


def evaluate_greedy(learner, env_factory, scaler, seed: int) -> dict:
    """Greedy rollouts over every day of ``env_factory``; means per day."""
    rng = np.random.default_rng(seed)
    envs = [env_factory.make(d) for d in range(env_factory.n_days)]
    obs = [e.reset() for e in envs]
    reward = np.zeros(len(envs))
    cost = np.zeros(len(envs))
    carbon = np.zeros(len(envs))
    n_ag = envs[0].n_agents
    for _ in range(envs[0].horizon):
        stacked = np.concatenate([scaler(o) for o in obs])
        actions = learner.act(stacked, rng, greedy=True)
        for i, e in enumerate(envs):
            obs[i], rew, _, res = e.step(actions[i * n_ag : (i + 1) * n_ag])
            reward[i] += rew.sum()
            cost[i] += res.cost_total
            carbon[i] += res.carbon_kg
    return {
        "mean_test_reward": float(reward.mean()),
        "mean_test_cost": float(cost.mean()),
        "mean_test_carbon": float(carbon.mean()),
    }


def train_offpolicy(learner, env_factory, hp: Hyperparams, seed: int, eval_factory=None, scaler=None):
    """Collect / update / evaluate loop shared by all learners.

    Each episode collects ``transitions_per_episode`` environment steps,
    then (once the buffer holds a batch) performs ``updates_per_episode``
    updates. Every ``eval_interval`` episodes the greedy policy is scored
    on ``eval_factory``. Returns the learning curve as a DataFrame.
    """
    rng = np.random.default_rng(seed)
    scaler = scaler or ObsScaler()
    buffer = ReplayBuffer(
        hp.buffer_capacity,
        env_factory.make(0).obs_dim,
        learner.action_shape,
        learner.action_dtype,
    )
    curve = []
    steps = 0
    for e in range(1, hp.episodes + 1):
        progress = (e - 1) / max(hp.episodes, 1)
        collect(learner, env_factory, hp.transitions_per_episode, rng, scaler, buffer, progress)
        steps += hp.transitions_per_episode
        while len(buffer) < hp.batch_size:
            collect(learner, env_factory, hp.transitions_per_episode, rng, scaler, buffer, progress)
            steps += hp.transitions_per_episode
        for _ in range(hp.updates_per_episode):
            learner.update(buffer.sample(hp.batch_size, rng), rng)
        if eval_factory is not None and e % hp.eval_interval == 0:
            row = {"episode": e, "steps": steps}
            row.update(evaluate_greedy(learner, eval_factory, scaler, seed + 10_007))
            curve.append(row)
            logger.info("episode %d: %s", e, row)
    return pd.DataFrame(curve, columns=list(CURVE_COLUMNS))
