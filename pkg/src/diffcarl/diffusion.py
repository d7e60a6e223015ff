"""Denoising-diffusion actor: schedule, posterior algebra and reverse sampler.

The reverse chain turns Gaussian noise into a logit vector ``x0`` over
the discrete action set, conditioned on the observation; a softmax of
``x0`` is the policy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Per-step arrays indexed ``k = 1..K`` at position ``k - 1``."""

    K: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def alpha_bar_prev(self, k: int) -> float:
        return 1.0 if k == 1 else float(self.alpha_bar[k - 2])

    def check_step(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ValueError(f"diffusion step {k} outside 1..{self.K}")


def build_schedule(K: int = 10, beta_min: float = 0.1, beta_max: float = 10.0) -> DiffusionSchedule:
    """``beta_k = 1 - exp(-beta_min/K - (2k-1)/(2K^2) (beta_max - beta_min))``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < beta_min < beta_max:
        raise ValueError("need 0 < beta_min < beta_max")
    k = np.arange(1, K + 1, dtype=float)
    beta = -np.expm1(-beta_min / K - (2 * k - 1) / (2 * K**2) * (beta_max - beta_min))
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    for a in (beta, alpha, alpha_bar, beta_tilde):
        a.setflags(write=False)
    return DiffusionSchedule(K, beta_min, beta_max, beta, alpha, alpha_bar, beta_tilde)


def forward_sample(x0, k: int, eps, schedule: DiffusionSchedule):
    """Closed-form marginal ``x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps``."""
    schedule.check_step(k)
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape[-1] != eps.shape[-1]:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar[k - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_params(x_k, x0, k: int, schedule: DiffusionSchedule):
    """Mean and variance of ``q(x_{k-1} | x_k, x0)``."""
    schedule.check_step(k)
    if k == 1:
        # alpha_bar_0 = 1: the coefficients are exactly (0, 1), which rounding would blur.
        return np.array(x0, dtype=float), 0.0
    ab = schedule.alpha_bar[k - 1]
    ab_prev = schedule.alpha_bar_prev(k)
    a = schedule.alpha[k - 1]
    b = schedule.beta[k - 1]
    c_xk = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * b / (1.0 - ab)
    mu = c_xk * np.asarray(x_k, dtype=float) + c_x0 * np.asarray(x0, dtype=float)
    return mu, float(schedule.beta_tilde[k - 1])


def sinusoidal_embed(k, dim: int):
    """Interleaved embedding: ``[sin(k w_0), cos(k w_0), sin(k w_1), ...]``.

    Accepts a scalar step or a 1-D tensor/array of steps; tensors in give
    a tensor out.
    """
    if dim < 2 or dim % 2:
        raise ValueError("embedding dimension must be even and >= 2")
    as_tensor = torch.is_tensor(k)
    kt = k if as_tensor else torch.as_tensor(k, dtype=torch.float64)
    freqs = 10000.0 ** (-torch.arange(0, dim, 2, dtype=kt.dtype) / dim)
    ang = kt.unsqueeze(-1) * freqs
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    return emb if as_tensor else emb.numpy()


@dataclass(frozen=True)
class NoiseNetSpec:
    obs_dim: int = 4
    n_actions: int = 45
    time_dim: int = 16
    time_hidden: int = 32
    hidden: int = 128


class NoiseNet(nn.Module):
    """Noise predictor ``eps(x_k, k, s)``.

    Step embedding -> fc(32) mish -> fc(16) mish, concatenated with
    ``x_k`` and the observation, then fc(128) mish -> fc(128) mish ->
    fc(|A|). The bounding tanh is applied by the sampler.
    """

    def __init__(self, spec: NoiseNetSpec = NoiseNetSpec()):
        super().__init__()
        self.spec = spec
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.time_dim, spec.time_hidden),
            nn.Mish(),
            nn.Linear(spec.time_hidden, spec.time_dim),
            nn.Mish(),
        )
        self.trunk = nn.Sequential(
            nn.Linear(spec.n_actions + spec.time_dim + spec.obs_dim, spec.hidden),
            nn.Mish(),
            nn.Linear(spec.hidden, spec.hidden),
            nn.Mish(),
            nn.Linear(spec.hidden, spec.n_actions),
        )

    def step_embedding(self, k, dtype=torch.float32) -> torch.Tensor:
        """Embedded step(s) after the two-layer MLP; shape ``(..., time_dim)``."""
        steps = torch.as_tensor(k, dtype=dtype)
        return self.time_mlp(sinusoidal_embed(steps, self.spec.time_dim))

    def forward(self, x_k: torch.Tensor, k, s: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x_k.shape[-1] != self.spec.n_actions or s.shape[-1] != self.spec.obs_dim:
            raise ValueError(
                f"expected x_k[..., {self.spec.n_actions}] and s[..., {self.spec.obs_dim}], "
                f"got {tuple(x_k.shape)} and {tuple(s.shape)}"
            )
        if temb is None:
            temb = self.step_embedding(float(k), x_k.dtype)
        temb = temb.expand(x_k.shape[:-1] + (self.spec.time_dim,))
        return self.trunk(torch.cat([x_k, temb, s], dim=-1))


def predict_noise(x_k, k: int, s, net: NoiseNet) -> torch.Tensor:
    return net(torch.as_tensor(x_k), k, torch.as_tensor(s))


def denoise_step(
    x_k, k: int, s, net: NoiseNet, schedule: DiffusionSchedule, noise, temb: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """One reverse step ``x_k -> x_{k-1}`` with the fixed posterior variance."""
    schedule.check_step(k)
    a = float(schedule.alpha[k - 1])
    b = float(schedule.beta[k - 1])
    ab = float(schedule.alpha_bar[k - 1])
    eps = torch.tanh(net(x_k, k, s, temb))
    mean = (x_k - (b / np.sqrt(1.0 - ab)) * eps) * (1.0 / np.sqrt(a))
    if k == 1:
        return mean
    return mean + float(np.sqrt(schedule.beta_tilde[k - 1])) * noise


@dataclass(eq=False)
class PolicyDistribution:
    probs: torch.Tensor
    x0: torch.Tensor

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log(self.probs + 1e-12)


def reverse_chain(s: torch.Tensor, net: NoiseNet, schedule: DiffusionSchedule, rng: np.random.Generator) -> torch.Tensor:
    """Run ``x_K ~ N(0, I)`` down to ``x_0``; autograd tracks ``net`` if enabled."""
    shape = tuple(s.shape[:-1]) + (net.spec.n_actions,)
    draws = rng.standard_normal((schedule.K,) + shape)
    draws = torch.as_tensor(draws, dtype=s.dtype)
    # One embedding pass for all K steps; row K - k holds step k.
    tembs = net.step_embedding(torch.arange(schedule.K, 0, -1), s.dtype)
    x = draws[0]
    for j, k in enumerate(range(schedule.K, 0, -1)):
        noise = draws[j + 1] if k > 1 else None
        x = denoise_step(x, k, s, net, schedule, noise, tembs[j])
    return x


def sample_policy(
    s,
    net: NoiseNet,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    temperature: float = 1.0,
    x0: Optional[torch.Tensor] = None,
) -> PolicyDistribution:
    """Softmax of the generated logits. Pass ``x0`` to skip the chain."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if x0 is None:
        x0 = reverse_chain(torch.as_tensor(s), net, schedule, rng)
    return PolicyDistribution(F.softmax(x0 / temperature, dim=-1), x0)
