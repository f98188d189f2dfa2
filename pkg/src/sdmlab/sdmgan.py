"""Model-based actor-critic with a GAN regulariser that matches the policy's
stationary state-action distribution to the offline data.

One training iteration: (periodically) branch short model rollouts of the
current policy from dataset states; sample a batch mixing real and model data;
fit the two critics to a smoothed clipped-double-Q target; build the "fake"
state-action batch ``[(s, a); (s', a')]`` and take a discriminator step; every
``policy_freq`` iterations take an actor step on
``-lambda * min_j Q_j(s, pi(s)) + generator loss`` with ``lambda = alpha / Q_avg``.
The first ``warm_epochs`` train the actor on the generator loss alone.
"""
from __future__ import annotations

import collections
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainerConfig
from .ensemble import ensemble_sample
from .env import evaluate_policy
from .errors import EmptyAfterTerminalFilter, EmptyBatch, ShapeMismatch, UntrainedEnsemble
from .nn import AdamState, Mlp, discriminator_bce, generator_loss, huber

RNG_STREAMS = ("init", "batch", "rollout", "policy_noise", "smoothing", "labels", "eval")
METRIC_COLUMNS = ("epoch", "mean_return", "std_return", "critic_loss", "disc_loss", "gen_loss",
                  "lambda", "q_avg", "skip_count")


class ImplicitPolicy:
    """``a = net([s, z])`` with ``z ~ N(0, I)``."""

    def __init__(self, net, noise_dim):
        self.net = net
        self.noise_dim = noise_dim

    def sample(self, s, rng, net=None):
        s = np.atleast_2d(s)
        z = rng.standard_normal((len(s), self.noise_dim))
        return (net or self.net)(np.concatenate([s, z], axis=1)), z

    def act(self, s, rng):
        a, _ = self.sample(np.asarray(s)[None, :], rng)
        return a[0]

    def to_json(self):
        return {"noise_dim": self.noise_dim, "net": self.net.to_json()}

    @classmethod
    def from_json(cls, obj):
        return cls(Mlp.from_json(obj["net"]), obj["noise_dim"])


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    d: np.ndarray
    n_env: int = 0

    def __len__(self):
        return len(self.r)


@dataclass
class FakeBatch:
    s: np.ndarray  # smoothed, non-terminal states
    z: np.ndarray
    a: np.ndarray
    s2: np.ndarray  # model next states, terminals removed
    z2: np.ndarray
    a2: np.ndarray

    @property
    def pairs(self):
        return np.concatenate([np.concatenate([self.s, self.a], 1),
                               np.concatenate([self.s2, self.a2], 1)], 0)

    def __len__(self):
        return len(self.s) + len(self.s2)


class ModelBuffer:
    """Ring of rollout batches; the oldest batch falls out past the retain window."""

    def __init__(self, max_batches):
        self.batches = collections.deque(maxlen=max_batches)
        self._cache = None

    def append(self, batch):
        self.batches.append(batch)
        self._cache = None

    def __len__(self):
        return sum(len(b) for b in self.batches)

    def arrays(self):
        if self._cache is None:
            self._cache = Batch(*(np.concatenate([getattr(b, k) for b in self.batches])
                                  for k in ("s", "a", "r", "s2", "d")))
        return self._cache


@dataclass
class TrainerState:
    config: TrainerConfig
    actor: ImplicitPolicy
    actor_target: Mlp
    critics: list
    critic_targets: list
    disc: Mlp
    opt_actor: AdamState
    opt_critics: list
    opt_disc: AdamState
    buffer: ModelBuffer
    rngs: dict
    reward_clamp: tuple
    q_avg: float | None = None
    critic_threshold: float = math.inf
    iteration: int = 0
    epoch: int = 0
    skip_count: int = 0
    lambda_log: list = field(default_factory=list)  # (lambda, q_avg) per actor step
    env_fraction_log: list = field(default_factory=list)
    rollout_log: list = field(default_factory=list)  # iterations at which rollouts ran


def make_rngs(seed):
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(RNG_STREAMS, children)}


def init_state(dataset, config, seed, max_action=1.0):
    rngs = make_rngs(seed)
    rng = rngs["init"]
    ds, da = dataset.state_dim, dataset.action_dim
    nz = config.noise_dim_for(ds)
    h = config.hidden
    actor_net = Mlp((ds + nz, *h, da), config.slope, output="tanh", max_output=max_action, rng=rng)
    critics = [Mlp((ds + da, *h, 1), config.slope, rng=rng) for _ in range(2)]
    disc = Mlp((ds + da, *h, 1), config.slope, rng=rng)
    r = dataset.r
    k = config.reward_clamp_sigmas
    clamp = (float(r.min() - k * r.std()), float(r.max() + k * r.std()))
    per_epoch = math.ceil(config.epoch_length / config.rollout_freq)
    return TrainerState(
        config=config,
        actor=ImplicitPolicy(actor_net, nz),
        actor_target=actor_net.copy(),
        critics=critics,
        critic_targets=[c.copy() for c in critics],
        disc=disc,
        opt_actor=AdamState.for_params(actor_net.params, config.lr_actor_disc, config.adam_beta1_actor_disc),
        opt_critics=[AdamState.for_params(c.params, config.lr_critic) for c in critics],
        opt_disc=AdamState.for_params(disc.params, config.lr_actor_disc, config.adam_beta1_actor_disc),
        buffer=ModelBuffer(max(1, config.rollout_retain_epochs * per_epoch)),
        rngs=rngs,
        reward_clamp=clamp,
    )


# --- data plumbing -----------------------------------------------------------

def model_sample(model, s, a, rng):
    """One step of the learned model; anything with ``sample(s, a, rng)`` also works."""
    if model is None:
        raise UntrainedEnsemble("model rollouts need a trained ensemble")
    if hasattr(model, "sample"):
        return model.sample(s, a, rng)
    return ensemble_sample(model, s, a, rng)


def _take(src, idx):
    return [getattr(src, k)[idx] for k in ("s", "a", "r", "s2", "d")]


def sample_batch(state, dataset, size, rng, env_only=False):
    """Mixed batch: each element from the offline data with probability ``f_real``."""
    model = state.buffer.arrays() if len(state.buffer) else None
    if env_only or model is None:
        n_env = size
    else:
        n_env = int(rng.binomial(size, state.config.f_real))
    env_part = _take(dataset, rng.integers(0, len(dataset), size=n_env))
    if n_env == size:
        return Batch(*env_part, n_env=n_env)
    model_part = _take(model, rng.integers(0, len(model), size=size - n_env))
    return Batch(*(np.concatenate([e, m]) for e, m in zip(env_part, model_part)), n_env=n_env)


def branch_rollouts(state, ensemble, dataset, rng):
    """``horizon``-step rollouts of the current policy on the model from dataset states."""
    if ensemble is None or not (hasattr(ensemble, "sample") or getattr(ensemble, "elites", None)):
        raise UntrainedEnsemble("model rollouts need a trained ensemble")
    cfg = state.config
    s = dataset.s[rng.integers(0, len(dataset), size=cfg.rollout_batch)]
    parts = []
    for _ in range(cfg.horizon):
        if len(s) == 0:
            break
        a, _ = state.actor.sample(s, rng)
        r, s2, done = model_sample(ensemble, s, a, rng)
        parts.append(Batch(s, a, r, s2, done))
        s = s2[~done]
    batch = Batch(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("s", "a", "r", "s2", "d")))
    state.buffer.append(batch)
    state.rollout_log.append(state.iteration)
    return batch


# --- critic ------------------------------------------------------------------

def _q(net, s, a):
    return net(np.concatenate([s, a], axis=1))[:, 0]


def critic_target(state, batch, rng=None):
    cfg = state.config
    rng = rng or state.rngs["smoothing"]
    expect = state.critics[0].sizes[0] - state.actor.net.sizes[-1]
    if batch.s2.ndim != 2 or batch.s2.shape[1] != expect or len(batch.r) != len(batch.s2):
        raise ShapeMismatch(f"next states {batch.s2.shape} / rewards {batch.r.shape}, state dim {expect}")
    n, ds = batch.s2.shape
    r = np.clip(batch.r, *state.reward_clamp)
    # first copy of every next state is kept exact, the rest get sigma_B noise
    rep = np.repeat(batch.s2[:, None, :], cfg.n_smooth, axis=1)
    noise = rng.normal(0.0, cfg.sigma_smooth, size=rep.shape)
    noise[:, 0, :] = 0.0
    s_hat = np.repeat((rep + noise).reshape(n * cfg.n_smooth, ds), cfg.n_actions_per_state, axis=0)
    a_hat, _ = state.actor.sample(s_hat, state.rngs["policy_noise"], net=state.actor_target)
    q = np.stack([_q(t, s_hat, a_hat) for t in state.critic_targets])
    mixed = cfg.c_min_weight * q.min(axis=0) + (1 - cfg.c_min_weight) * q.max(axis=0)
    q_next = mixed.reshape(n, cfg.n_smooth * cfg.n_actions_per_state).mean(axis=1)
    q_next = q_next * (np.abs(q_next) < cfg.q_cutoff)
    return np.where(batch.d, r, r + cfg.gamma * q_next)


def critic_loss_and_grads(state, batch, target):
    x = np.concatenate([batch.s, batch.a], axis=1)
    losses, grads, qs = [], [], []
    for net in state.critics:
        q, cache = net.forward(x)
        loss, g = huber(q[:, 0] - target, state.config.huber_threshold)
        pg, _ = net.backward(cache, g[:, None])
        losses.append(loss)
        grads.append(pg)
        qs.append(q[:, 0])
    return losses, grads, qs


def critic_update(state, batch, target=None):
    """Huber regression of both critics; skipped when the batch loss exceeds the
    running threshold. Returns ``(mean loss, skipped)``."""
    if target is None:
        target = critic_target(state, batch)
    losses, grads, qs = critic_loss_and_grads(state, batch, target)
    loss = float(np.mean(losses))
    skipped = loss > state.critic_threshold
    if skipped:
        state.skip_count += 1
    else:
        for net, opt, g in zip(state.critics, state.opt_critics, grads):
            opt.step(net.params, g)
    batch_q = float(np.mean(np.abs(qs[0])))
    b = state.config.tau
    state.q_avg = batch_q if state.q_avg is None else b * batch_q + (1 - b) * state.q_avg
    return loss, skipped


def update_critic_threshold(state, epoch_losses):
    losses = np.asarray(epoch_losses, dtype=np.float64)
    if losses.size == 0:
        return state.critic_threshold
    cfg = state.config
    stat = float(losses.mean() + cfg.critic_threshold_sigmas * losses.std())
    if math.isinf(state.critic_threshold):
        state.critic_threshold = stat
    else:
        rate = cfg.critic_threshold_rate
        state.critic_threshold = rate * stat + (1 - rate) * state.critic_threshold
    return state.critic_threshold


# --- GAN regulariser ---------------------------------------------------------

def build_fake_batch(state, ensemble, s, rng, s_terminal=None):
    """``[(s + N(0, sigma_J^2), a); (s', a')]`` with terminal states dropped."""
    s = np.asarray(s, dtype=np.float64)
    if s_terminal is not None:
        s = s[~np.asarray(s_terminal, dtype=bool)]
    if len(s) == 0:
        raise EmptyAfterTerminalFilter("every sampled state is terminal")
    if state.config.sigma_fake > 0:
        s = s + rng.normal(0.0, state.config.sigma_fake, size=s.shape)
    a, z = state.actor.sample(s, rng)
    _, s2, done = model_sample(ensemble, s, a, rng)
    s2 = s2[~done]
    a2, z2 = state.actor.sample(s2, rng) if len(s2) else (np.zeros((0, a.shape[1])), np.zeros((0, z.shape[1])))
    return FakeBatch(s, z, a, s2, z2, a2)


def true_labels(config, n, rng):
    """One-sided label smoothing: targets ``U[low, high]`` for real pairs, or exactly 1."""
    if config.label_smoothing:
        return rng.uniform(config.label_smooth_low, config.label_smooth_high, size=n)
    return np.ones(n)


def discriminator_update(state, true_pairs, fake_pairs, rng=None):
    if len(true_pairs) == 0 or len(fake_pairs) == 0:
        raise EmptyBatch("discriminator needs non-empty true and fake batches")
    labels = true_labels(state.config, len(true_pairs), rng or state.rngs["labels"])
    lt, ct = state.disc.forward(true_pairs)
    lf, cf = state.disc.forward(fake_pairs)
    loss, gt, gf = discriminator_bce(lt[:, 0], labels, lf[:, 0])
    g1, _ = state.disc.backward(ct, gt[:, None])
    g2, _ = state.disc.backward(cf, gf[:, None])
    state.opt_disc.step(state.disc.params, [a + b for a, b in zip(g1, g2)])
    return loss


def actor_loss_and_grads(state, s_batch, z_batch, fake, use_q=True):
    """Loss ``-lambda * mean(min_j Q_j(s, pi(s, z))) + L_g(fake)`` and its actor gradient.

    The fake next states are treated as constants (no gradient through the model).
    """
    cfg = state.config
    actor = state.actor.net
    ds = s_batch.shape[1]
    total_grads = [np.zeros_like(p) for p in actor.params]
    lam = 0.0
    loss_q = 0.0
    if use_q:
        lam = cfg.alpha / state.q_avg
        a, cache = actor.forward(np.concatenate([s_batch, z_batch], axis=1))
        x = np.concatenate([s_batch, a], axis=1)
        outs = [c.forward(x) for c in state.critics]
        q = np.stack([o[0][:, 0] for o in outs])
        pick = np.argmin(q, axis=0)
        qmin = q[pick, np.arange(q.shape[1])]
        loss_q = -lam * float(qmin.mean())
        g_a = np.zeros_like(a)
        for j, (net, (_, c_cache)) in enumerate(zip(state.critics, outs)):
            rows = pick == j
            gq = np.where(rows, -lam / len(qmin), 0.0)[:, None]
            _, gx = net.backward(c_cache, gq)
            g_a += gx[:, ds:]
        pg, _ = actor.backward(cache, g_a)
        total_grads = [t + g for t, g in zip(total_grads, pg)]

    s_all = np.concatenate([fake.s, fake.s2])
    z_all = np.concatenate([fake.z, fake.z2])
    a_all, a_cache = actor.forward(np.concatenate([s_all, z_all], axis=1))
    logits, d_cache = state.disc.forward(np.concatenate([s_all, a_all], axis=1))
    gen, g_logit = generator_loss(logits[:, 0], cfg.generator_loss)
    _, gx = state.disc.backward(d_cache, g_logit[:, None])
    pg, _ = actor.backward(a_cache, gx[:, ds:])
    total_grads = [t + g for t, g in zip(total_grads, pg)]
    return loss_q + gen, gen, lam, total_grads


def actor_update(state, batch, fake, rng=None, use_q=True):
    rng = rng or state.rngs["policy_noise"]
    z = rng.standard_normal((len(batch), state.actor.noise_dim))
    loss, gen, lam, grads = actor_loss_and_grads(state, batch.s, z, fake, use_q)
    state.opt_actor.step(state.actor.net.params, grads)
    if use_q:
        state.lambda_log.append((lam, state.q_avg))
    return loss, gen, lam


def soft_update_targets(state, critics=True):
    tau = state.config.tau
    state.actor_target.soft_update_from(state.actor.net, tau)
    if critics:
        for t, c in zip(state.critic_targets, state.critics):
            t.soft_update_from(c, tau)


# --- main loop ---------------------------------------------------------------

def train_iteration(state, dataset, ensemble, warm):
    cfg = state.config
    rng = state.rngs["batch"]
    out = {}
    if not warm and state.iteration % cfg.rollout_freq == 0:
        branch_rollouts(state, ensemble, dataset, state.rngs["rollout"])
    batch = sample_batch(state, dataset, cfg.batch_size, rng, env_only=warm)
    state.env_fraction_log.append(batch.n_env / len(batch))
    if not warm:
        out["critic_loss"], _ = critic_update(state, batch)
    fake = build_fake_batch(state, ensemble, batch.s, state.rngs["policy_noise"])
    true_idx = rng.integers(0, len(dataset), size=len(fake))
    true_pairs = np.concatenate([dataset.s[true_idx], dataset.a[true_idx]], axis=1)
    out["disc_loss"] = discriminator_update(state, true_pairs, fake.pairs)
    if state.iteration % cfg.policy_freq == 0:
        _, out["gen_loss"], lam = actor_update(state, batch, fake, use_q=not warm)
        if not warm:
            out["lambda"] = lam
    soft_update_targets(state, critics=not warm)
    state.iteration += 1
    return out


def train(dataset, ensemble, config, seed, env=None, eval_seed=None, log_path=None, callback=None):
    """Run warm start plus the full loop; returns ``(state, metrics rows)``.

    ``env`` is used for the per-epoch evaluation row; without it returns are NaN.
    """
    if ensemble is None:
        raise UntrainedEnsemble("train needs a fitted dynamics ensemble")
    if dataset.s.ndim != 2:
        raise ShapeMismatch("train needs a continuous dataset")
    max_action = getattr(env, "max_action", 1.0)
    state = init_state(dataset, config, seed, max_action)
    rows = []
    eval_seed = seed if eval_seed is None else eval_seed
    for epoch in range(config.n_epochs):
        warm = epoch < config.warm_epochs
        stats = collections.defaultdict(list)
        skips_before = state.skip_count
        for _ in range(config.epoch_length):
            for k, v in train_iteration(state, dataset, ensemble, warm).items():
                stats[k].append(v)
        if not warm:
            update_critic_threshold(state, stats["critic_loss"])
        if env is not None:
            ev = evaluate_policy(env, state.actor, config.eval_episodes, seed=eval_seed + epoch)
        else:
            ev = {"mean": math.nan, "std": math.nan}
        row = {
            "epoch": epoch,
            "mean_return": ev["mean"],
            "std_return": ev["std"],
            "critic_loss": float(np.mean(stats["critic_loss"])) if stats["critic_loss"] else math.nan,
            "disc_loss": float(np.mean(stats["disc_loss"])),
            "gen_loss": float(np.mean(stats["gen_loss"])) if stats["gen_loss"] else math.nan,
            "lambda": stats["lambda"][-1] if stats["lambda"] else math.nan,
            "q_avg": state.q_avg if state.q_avg is not None else math.nan,
            "skip_count": state.skip_count - skips_before,
        }
        rows.append(row)
        state.epoch = epoch + 1
        if callback is not None:
            callback(row)
    if log_path is not None:
        write_metrics(rows, log_path)
    return state, rows


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
