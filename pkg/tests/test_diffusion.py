import numpy as np
import pytest
import torch

from diffcarl.diffusion import (
    NoiseNet,
    NoiseNetSpec,
    build_schedule,
    denoise_step,
    forward_sample,
    posterior_params,
    predict_noise,
    reverse_chain,
    sample_policy,
    sinusoidal_embed,
)

SCHED = build_schedule(10, 0.1, 10.0)


class FixedNoise(torch.nn.Module):
    """Stand-in network returning a fixed pre-tanh output."""

    def __init__(self, out):
        super().__init__()
        self.out = torch.as_tensor(out, dtype=torch.float64)

    def forward(self, x_k, k, s, temb=None):
        return self.out.expand_as(x_k)


def test_first_beta():
    assert SCHED.beta[0] == pytest.approx(1 - np.exp(-0.01 - 0.0495), rel=1e-12)
    assert SCHED.beta[0] == pytest.approx(0.05777, abs=1e-5)


def test_schedule_monotone_and_tail():
    for K, lo, hi in [(10, 0.1, 10.0), (1, 0.1, 10.0), (50, 0.01, 2.0), (3, 1.0, 20.0)]:
        s = build_schedule(K, lo, hi)
        assert np.all((s.beta > 0) & (s.beta < 1))
        assert np.all(np.diff(s.beta) > 0)
        assert np.all(np.diff(s.alpha_bar) < 0)
    assert SCHED.alpha_bar[-1] < 0.01
    assert SCHED.beta_tilde[0] == 0.0
    # independent product
    ab = 1.0
    for k in range(1, 11):
        ab *= np.exp(-0.01 - (2 * k - 1) / 200 * 9.9)
    assert SCHED.alpha_bar[-1] == pytest.approx(ab, rel=1e-12)


@pytest.mark.parametrize("args", [(0, 0.1, 1.0), (10, 0.0, 1.0), (10, 2.0, 1.0)])
def test_schedule_preconditions(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_forward_sample_limits():
    x0 = np.array([1.0, -2.0, 3.0])
    eps = np.array([0.5, 0.1, -1.0])
    ab = SCHED.alpha_bar[3]
    np.testing.assert_allclose(forward_sample(x0, 4, np.zeros(3), SCHED), np.sqrt(ab) * x0)
    np.testing.assert_allclose(forward_sample(np.zeros(3), 4, eps, SCHED), np.sqrt(1 - ab) * eps)
    with pytest.raises(ValueError):
        forward_sample(x0, 4, np.zeros(2), SCHED)
    with pytest.raises(ValueError):
        forward_sample(x0, 11, eps, SCHED)


@pytest.mark.parametrize("k", [1, 3, 10])
def test_forward_marginal_monte_carlo(k):
    rng = np.random.default_rng(k)
    x0 = np.array([1.0, 2.0, -3.0])
    n = 100_000
    ab = SCHED.alpha_bar[k - 1]
    closed = forward_sample(x0, k, rng.standard_normal((n, 3)), SCHED)
    # iterate the one-step kernel k times
    x = np.broadcast_to(x0, (n, 3)).copy()
    for j in range(k):
        x = np.sqrt(SCHED.alpha[j]) * x + np.sqrt(SCHED.beta[j]) * rng.standard_normal((n, 3))
    for sample in (closed, x):
        np.testing.assert_allclose(sample.mean(0), np.sqrt(ab) * x0, rtol=0.01, atol=0.01 * np.sqrt(1 - ab))
        np.testing.assert_allclose(sample.var(0), 1 - ab, rtol=0.02)


def test_posterior_boundary():
    rng = np.random.default_rng(0)
    x0, xk = rng.standard_normal(5), rng.standard_normal(5)
    mu, var = posterior_params(xk, x0, 1, SCHED)
    assert np.array_equal(mu, x0) and var == 0.0
    with pytest.raises(ValueError):
        posterior_params(xk, x0, 0, SCHED)


def test_posterior_coefficients_sum_to_one_iff():
    # With x_k = x0 the mean is (c_xk + c_x0) x0; independent evaluation of both coefficients.
    for k in range(1, 11):
        a, b, ab = SCHED.alpha[k - 1], SCHED.beta[k - 1], SCHED.alpha_bar[k - 1]
        abp = 1.0 if k == 1 else SCHED.alpha_bar[k - 2]
        c = np.sqrt(a) * (1 - abp) / (1 - ab) + np.sqrt(abp) * b / (1 - ab)
        mu, _ = posterior_params(np.ones(2), np.ones(2), k, SCHED)
        np.testing.assert_allclose(mu, c, rtol=1e-12)


def test_reparameterised_mean_identity():
    rng = np.random.default_rng(1)
    for k in range(2, 11):
        xk = rng.standard_normal(45)
        eps = np.tanh(rng.standard_normal(45))
        ab = SCHED.alpha_bar[k - 1]
        x0_hat = (xk - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        mu, var = posterior_params(xk, x0_hat, k, SCHED)
        net = FixedNoise(np.arctanh(eps))
        out = denoise_step(torch.tensor(xk), k, torch.zeros(4), net, SCHED, torch.zeros(45)).numpy()
        assert np.max(np.abs(mu - out)) < 1e-10
        assert var == pytest.approx(SCHED.beta_tilde[k - 1], rel=1e-15)


def test_denoise_zero_prediction():
    net = FixedNoise(np.zeros(3))
    xk = torch.tensor([1.0, -1.0, 2.0], dtype=torch.float64)
    noise = torch.tensor([0.3, 0.2, -0.1], dtype=torch.float64)
    k = 5
    out = denoise_step(xk, k, torch.zeros(4), net, SCHED, noise)
    want = xk / np.sqrt(SCHED.alpha[k - 1]) + np.sqrt(SCHED.beta_tilde[k - 1]) * noise
    torch.testing.assert_close(out, want, rtol=1e-14, atol=0)
    a = denoise_step(xk, 1, torch.zeros(4), net, SCHED, noise)
    b = denoise_step(xk, 1, torch.zeros(4), net, SCHED, 5 * noise)
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        denoise_step(xk, 11, torch.zeros(4), net, SCHED, noise)


def test_embedding():
    np.testing.assert_array_equal(sinusoidal_embed(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])
    embs = np.array([sinusoidal_embed(k, 16) for k in range(1, 11)])
    assert np.all(np.abs(embs) <= 1)
    d = np.linalg.norm(embs[:, None] - embs[None], axis=-1)
    assert d[~np.eye(10, dtype=bool)].min() > 1e-3
    np.testing.assert_allclose(sinusoidal_embed(3.0, 4), [np.sin(3), np.cos(3), np.sin(0.03), np.cos(0.03)])
    with pytest.raises(ValueError):
        sinusoidal_embed(1, 5)


def _net(seed=0, **kw):
    torch.manual_seed(seed)
    return NoiseNet(NoiseNetSpec(**kw)).double()


def test_noise_net_shapes_and_purity():
    net = _net()
    x, s = torch.randn(7, 45, dtype=torch.float64), torch.randn(7, 4, dtype=torch.float64)
    a, b = predict_noise(x, 3, s, net), predict_noise(x, 3, s, net)
    assert a.shape == (7, 45) and torch.equal(a, b)
    with pytest.raises(ValueError):
        net(torch.zeros(7, 44, dtype=torch.float64), 3, s)


def test_noise_net_gradient_finite_difference():
    net = _net(1, n_actions=4, obs_dim=4, hidden=4)
    x = torch.randn(4, dtype=torch.float64)
    s = torch.randn(4, dtype=torch.float64)
    w = torch.randn(4, dtype=torch.float64)
    f = lambda: float((w * net(x, 2, s)).sum().detach())
    (w * net(x, 2, s)).sum().backward()
    h = 1e-6
    for p in net.parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 5)):
            old = float(flat[i])
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            dn = f()
            flat[i] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - float(grad[i])) <= 1e-4 * max(abs(fd), 1e-3)


def test_sample_policy_valid_distribution():
    net = _net(2)
    rng = np.random.default_rng(0)
    s = torch.randn(1000, 4, dtype=torch.float64)
    with torch.no_grad():
        d = sample_policy(s, net, SCHED, rng)
    assert torch.all(d.probs >= 0)
    assert torch.max(torch.abs(d.probs.sum(-1) - 1)) < 1e-6
    assert d.x0.shape == (1000, 45)


def test_sample_policy_forced_x0_and_temperature():
    net = _net()
    rng = np.random.default_rng(0)
    d = sample_policy(torch.zeros(4), net, SCHED, rng, x0=torch.zeros(45))
    torch.testing.assert_close(d.probs, torch.full((45,), 1 / 45))
    x0 = torch.randn(45)
    tops = {int(sample_policy(None, net, SCHED, rng, t, x0=x0).probs.argmax()) for t in (0.1, 1.0, 7.0)}
    assert tops == {int(x0.argmax())}
    with pytest.raises(ValueError):
        sample_policy(torch.zeros(4), net, SCHED, rng, temperature=0.0)


def test_chain_reproducible():
    net = _net(3)
    s = torch.randn(5, 4, dtype=torch.float64)
    with torch.no_grad():
        a = reverse_chain(s, net, SCHED, np.random.default_rng(11))
        b = reverse_chain(s, net, SCHED, np.random.default_rng(11))
        c = reverse_chain(s, net, SCHED, np.random.default_rng(12))
    assert torch.equal(a, b) and not torch.equal(a, c)
