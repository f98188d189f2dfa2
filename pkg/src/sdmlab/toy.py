"""Behaviour cloning on the circle dataset with three conditional-GAN generators.

``x`` plays the state and ``y`` the action; at almost every ``x`` the conditional
``p(y | x)`` has two modes ``+-sqrt(r^2 - x^2)``. An implicit generator can put
mass on both, a Gaussian one blurs them, a deterministic one must pick one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ToyConfig
from .errors import ValidationError
from .nn import AdamState, Mlp, discriminator_bce, generator_loss

GENERATOR_KINDS = ("implicit", "gaussian", "deterministic")
LOG_STD_CLAMP = (-5.0, 5.0)


@dataclass
class ToyGenerator:
    kind: str
    net: Mlp
    noise_dim: int = 0

    def forward(self, x, rng):
        """Sample ``y`` for each row of ``x``; returns ``(y, cache)`` for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if self.kind == "implicit":
            z = rng.standard_normal((len(x), self.noise_dim))
            y, cache = self.net.forward(np.concatenate([x, z], axis=1))
            return y, (cache, None, None)
        out, cache = self.net.forward(x)
        if self.kind == "deterministic":
            return out, (cache, None, None)
        k = out.shape[1] // 2
        raw = out[:, k:]
        log_std = np.clip(raw, *LOG_STD_CLAMP)
        eps = rng.standard_normal((len(x), k))
        return out[:, :k] + np.exp(log_std) * eps, (cache, eps, raw)

    def backward(self, cache, grad_y):
        net_cache, eps, raw = cache
        if self.kind != "gaussian":
            return self.net.backward(net_cache, grad_y)[0]
        inside = (raw >= LOG_STD_CLAMP[0]) & (raw <= LOG_STD_CLAMP[1])
        g_ls = grad_y * eps * np.exp(np.clip(raw, *LOG_STD_CLAMP)) * inside
        return self.net.backward(net_cache, np.concatenate([grad_y, g_ls], axis=1))[0]

    def sample(self, x, rng):
        return self.forward(x, rng)[0]


def make_generator(kind, config, rng, state_dim=1, action_dim=1):
    if kind not in GENERATOR_KINDS:
        raise ValidationError(f"generator kind must be one of {GENERATOR_KINDS}, got {kind!r}")
    h = (config.dim,) * 3
    if kind == "implicit":
        sizes = (state_dim + config.noise_dim, *h, action_dim)
        return ToyGenerator(kind, Mlp(sizes, slope=0.0, rng=rng), config.noise_dim)
    out = action_dim * (2 if kind == "gaussian" else 1)
    return ToyGenerator(kind, Mlp((state_dim, *h, out), slope=0.0, rng=rng))


@dataclass
class ToyResult:
    generator: ToyGenerator
    discriminator: Mlp
    coverage: float
    disc_losses: list
    gen_losses: list
    coverage_history: list  # (iteration, coverage) when tracked


def mode_coverage(generator, circle, config, rng):
    """Fraction of test ``x`` with ``|x| < x_max`` for which the sampled ``y`` hit
    within ``3 sigma`` of both ``+sqrt(r^2 - x^2)`` and ``-sqrt(r^2 - x^2)``."""
    x = circle.test[:, 0]
    x = x[np.abs(x) < config.coverage_x_max][:config.coverage_n_x]
    if len(x) == 0:
        return float("nan")
    m = config.coverage_samples
    y = generator.sample(np.repeat(x, m)[:, None], rng)[:, 0].reshape(len(x), m)
    mode = np.sqrt(circle.radius ** 2 - x ** 2)[:, None]
    tol = 3.0 * circle.sigma
    upper = (np.abs(y - mode) <= tol).any(axis=1)
    lower = (np.abs(y + mode) <= tol).any(axis=1)
    return float(np.mean(upper & lower))


def behavior_clone_toy(circle, generator_kind, config=None, seed=0, n_iters=None, coverage_every=None):
    """Conditional GAN fit of ``p(y | x)`` on ``circle.train``; returns a :class:`ToyResult`.

    ``coverage_every`` records the coverage curve; it draws from its own stream,
    so tracking does not change the trained weights.
    """
    config = config or ToyConfig()
    n_iters = config.n_iters if n_iters is None else n_iters
    rng = np.random.default_rng(seed)
    gen = make_generator(generator_kind, config, rng)
    disc = Mlp((2, config.dim, config.dim, config.dim, 1), slope=0.0, rng=rng)
    opt_g = AdamState.for_params(gen.net.params, config.lr, config.beta1, config.beta2)
    opt_d = AdamState.for_params(disc.params, config.lr, config.beta1, config.beta2)
    data = circle.train
    bs = config.batch_size
    labels = np.full(bs, config.label_smooth)
    d_hist, g_hist, cov_hist = [], [], []
    track_rng = np.random.default_rng([seed, 3])
    for it in range(n_iters):
        for _ in range(config.critic_iters):
            xy = data[rng.integers(0, len(data), size=bs)]
            x = xy[:, :1]
            y_fake, _ = gen.forward(x, rng)
            lt, ct = disc.forward(xy)
            lf, cf = disc.forward(np.concatenate([x, y_fake], axis=1))
            d_loss, gt, gf = discriminator_bce(lt[:, 0], labels, lf[:, 0])
            g1, _ = disc.backward(ct, gt[:, None])
            g2, _ = disc.backward(cf, gf[:, None])
            opt_d.step(disc.params, [a + b for a, b in zip(g1, g2)])
        x = data[rng.integers(0, len(data), size=bs), :1]
        y_fake, g_cache = gen.forward(x, rng)
        lf, cf = disc.forward(np.concatenate([x, y_fake], axis=1))
        g_loss, g_logit = generator_loss(lf[:, 0], "nonsaturating")
        _, g_in = disc.backward(cf, g_logit[:, None])
        opt_g.step(gen.net.params, gen.backward(g_cache, g_in[:, 1:]))
        d_hist.append(d_loss)
        g_hist.append(g_loss)
        if coverage_every and (it + 1) % coverage_every == 0:
            cov_hist.append((it + 1, mode_coverage(gen, circle, config, track_rng)))
    cov = mode_coverage(gen, circle, config, np.random.default_rng([seed, 1]))
    return ToyResult(gen, disc, cov, d_hist, g_hist, cov_hist)
