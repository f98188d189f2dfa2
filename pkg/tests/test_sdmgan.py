import copy
import csv

import numpy as np
import pytest

from sdmlab.config import TrainerConfig
from sdmlab.data import Dataset
from sdmlab.env import ControllerPolicy, ExactModel, PointMassEnv, collect_dataset
from sdmlab.errors import EmptyAfterTerminalFilter, EmptyBatch, ShapeMismatch, UntrainedEnsemble
from sdmlab.nn import gradient_check, huber
from sdmlab.sdmgan import (METRIC_COLUMNS, Batch, actor_loss_and_grads, actor_update, branch_rollouts,
                           build_fake_batch, critic_loss_and_grads, critic_target, critic_update,
                           discriminator_update, init_state, sample_batch, soft_update_targets, train, true_labels,
                           update_critic_threshold)

ENV = PointMassEnv()
MODEL = ExactModel(ENV)


def tiny_config(**kw):
    base = dict(hidden=(16, 16), batch_size=32, n_smooth=3, epoch_length=20, n_epochs=3, warm_epochs=1,
                rollout_freq=10, rollout_batch=16, eval_episodes=2)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return collect_dataset(ENV, ControllerPolicy(ENV), 400, seed=0)


def batch_from(ds, idx):
    return Batch(ds.s[idx], ds.a[idx], ds.r[idx], ds.s2[idx], ds.d[idx])


def test_defaults():
    c = TrainerConfig()
    assert (c.alpha, c.n_smooth, c.sigma_smooth, c.sigma_fake, c.c_min_weight) == (10.0, 50, 3e-4, 3e-4, 0.75)
    assert c.noise_dim_for(11) == 5 and c.noise_dim_for(40) == 10 and c.noise_dim_for(1) == 1


# --- rollouts ------------------------------------------------------------------

def test_branch_h1(dataset):
    st = init_state(dataset, tiny_config(rollout_batch=50), 0)
    b = branch_rollouts(st, MODEL, dataset, np.random.default_rng(0))
    assert len(b) == 50 and len(st.buffer) == 50


def test_branch_horizon_stops_at_terminal(dataset):
    st = init_state(dataset, tiny_config(rollout_batch=50, horizon=3), 0)
    b = branch_rollouts(st, MODEL, dataset, np.random.default_rng(0))
    assert 50 <= len(b) <= 150


def test_branch_untrained(dataset):
    st = init_state(dataset, tiny_config(), 0)
    with pytest.raises(UntrainedEnsemble):
        branch_rollouts(st, None, dataset, np.random.default_rng(0))


def test_buffer_retain_window(dataset):
    cfg = tiny_config(epoch_length=20, rollout_freq=10, rollout_retain_epochs=2)
    st = init_state(dataset, cfg, 0)
    assert st.buffer.batches.maxlen == 4
    for _ in range(10):
        branch_rollouts(st, MODEL, dataset, np.random.default_rng(0))
        assert len(st.buffer.batches) <= 4


def test_rollout_schedule(dataset):
    cfg = tiny_config(n_epochs=2, warm_epochs=1, epoch_length=25, rollout_freq=10)
    st, _ = train(dataset, MODEL, cfg, seed=0)
    # only after warm start, and only on multiples of rollout_freq
    assert st.rollout_log == [30, 40]
    assert len(st.buffer) == 2 * cfg.rollout_batch


def test_rollouts_match_direct_simulation(dataset):
    cfg = tiny_config(rollout_batch=6000)
    st = init_state(dataset, cfg, 0)
    b = branch_rollouts(st, MODEL, dataset, np.random.default_rng(1))
    # direct simulation from the same start states with the same policy
    rng = np.random.default_rng(2)
    a, _ = st.actor.sample(b.s, rng)
    direct = np.array([ENV.step(s, u, rng)[1] for s, u in zip(b.s, a)])
    edges = np.linspace(-1, 1, 6)
    h1, _, _ = np.histogram2d(b.s2[:, 0], b.s2[:, 1], bins=[edges, edges])
    h2, _, _ = np.histogram2d(direct[:, 0], direct[:, 1], bins=[edges, edges])
    assert 0.5 * np.abs(h1 / h1.sum() - h2 / h2.sum()).sum() < 0.1


def test_mixing_fraction(dataset):
    cfg = tiny_config()
    st = init_state(dataset, cfg, 0)
    branch_rollouts(st, MODEL, dataset, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    fr = [sample_batch(st, dataset, 64, rng).n_env / 64 for _ in range(200)]
    se = np.sqrt(0.5 * 0.5 / (64 * 200))
    assert abs(np.mean(fr) - cfg.f_real) < 3 * se


# --- critic ----------------------------------------------------------------------

def test_target_terminal_is_clamped_reward(dataset):
    st = init_state(dataset, tiny_config(), 0)
    b = batch_from(dataset, np.arange(4))
    b.d = np.ones(4, bool)
    b.r = np.array([-1e6, 1e6, -0.3, -0.7])
    t = critic_target(st, b)
    lo, hi = st.reward_clamp
    np.testing.assert_allclose(t, [lo, hi, -0.3, -0.7])


def test_target_common_value(dataset):
    cfg = tiny_config(c_min_weight=1.0, n_smooth=1, sigma_smooth=0.0)
    st = init_state(dataset, cfg, 0)
    st.critic_targets = [st.critic_targets[0], st.critic_targets[0].copy()]
    b = batch_from(dataset, np.arange(8))
    b.d = np.zeros(8, bool)
    noise = copy.deepcopy(st.rngs["policy_noise"])
    t = critic_target(st, b)
    a, _ = st.actor.sample(b.s2, noise, net=st.actor_target)
    q = st.critic_targets[0](np.concatenate([b.s2, a], 1))[:, 0]
    np.testing.assert_allclose(t, np.clip(b.r, *st.reward_clamp) + cfg.gamma * q, atol=1e-12)


def test_target_q_cutoff(dataset):
    st = init_state(dataset, tiny_config(), 0)
    for net in st.critic_targets:
        net.params[-1][:] = 5000.0
        net.params[-2][:] = 0.0
    b = batch_from(dataset, np.arange(5))
    b.d = np.zeros(5, bool)
    np.testing.assert_allclose(critic_target(st, b), np.clip(b.r, *st.reward_clamp))


def test_target_shape(dataset):
    st = init_state(dataset, tiny_config(), 0)
    b = batch_from(dataset, np.arange(3))
    b.s2 = np.zeros((3, 5))
    with pytest.raises(ShapeMismatch):
        critic_target(st, b)


def test_critic_skip(dataset):
    st = init_state(dataset, tiny_config(), 0)
    st.critic_threshold = -1.0
    before = [p.copy() for c in st.critics for p in c.params]
    _, skipped = critic_update(st, batch_from(dataset, np.arange(16)))
    assert skipped and st.skip_count == 1
    for a, b in zip(before, [p for c in st.critics for p in c.params]):
        np.testing.assert_array_equal(a, b)


def test_critic_updates_below_threshold(dataset):
    st = init_state(dataset, tiny_config(), 0)
    before = st.critics[0].params[0].copy()
    _, skipped = critic_update(st, batch_from(dataset, np.arange(16)))
    assert not skipped and not np.array_equal(before, st.critics[0].params[0])


def test_threshold_rule():
    st = type("S", (), {})()
    st.config = TrainerConfig()
    st.critic_threshold = float("inf")
    losses = [1.0, 2.0, 3.0]
    first = update_critic_threshold(st, losses)
    assert first == pytest.approx(2.0 + 3 * np.std(losses))
    second = update_critic_threshold(st, [0.0, 0.0])
    assert second == pytest.approx(0.95 * first)


def test_huber_slope_bound():
    _, g = huber(np.array([1e6]), 500.0)
    assert abs(g[0]) == 500.0


def test_critic_gradient(dataset):
    st = init_state(dataset, tiny_config(), 0)
    b = batch_from(dataset, np.arange(12))
    target = np.random.default_rng(0).normal(size=12)

    def fn_and_grad():
        losses, grads, _ = critic_loss_and_grads(st, b, target)
        return losses[1], grads[1]
    assert gradient_check(fn_and_grad, st.critics[1].params) < 1e-4


# --- GAN parts ---------------------------------------------------------------------

def test_fake_batch_all_terminal(dataset):
    st = init_state(dataset, tiny_config(), 0)
    with pytest.raises(EmptyAfterTerminalFilter):
        build_fake_batch(st, MODEL, dataset.s[:4], np.random.default_rng(0), s_terminal=np.ones(4, bool))


def test_fake_batch_unperturbed(dataset):
    st = init_state(dataset, tiny_config(sigma_fake=0.0), 0)
    fb = build_fake_batch(st, MODEL, dataset.s[:10], np.random.default_rng(0))
    np.testing.assert_array_equal(fb.s, dataset.s[:10])


def test_fake_batch_size(dataset):
    st = init_state(dataset, tiny_config(), 0)
    s = dataset.s[np.random.default_rng(0).integers(0, len(dataset), 512)]
    fb = build_fake_batch(st, MODEL, s, np.random.default_rng(0))
    assert len(fb.s) == 512 and len(fb.pairs) == len(fb) <= 1024
    assert len(fb.s2) == len(fb.a2)


def test_disc_empty(dataset):
    st = init_state(dataset, tiny_config(), 0)
    with pytest.raises(EmptyBatch):
        discriminator_update(st, np.zeros((0, 4)), np.zeros((3, 4)))


def test_disc_separable_descent(dataset):
    st = init_state(dataset, tiny_config(label_smoothing=False), 0)
    true = np.full((32, 4), 0.5)
    fake = np.full((32, 4), -0.5)
    l0 = discriminator_update(st, true, fake)
    l1 = discriminator_update(st, true, fake)
    assert l1 < l0


def test_labels_no_smoothing():
    assert np.all(true_labels(TrainerConfig(label_smoothing=False), 5, np.random.default_rng(0)) == 1.0)
    lab = true_labels(TrainerConfig(), 1000, np.random.default_rng(0))
    assert lab.min() >= 0.8 and lab.max() <= 1.0


def test_disc_optimum_half():
    ds = Dataset.continuous(np.zeros((10, 1)), np.zeros((10, 1)), np.zeros(10), np.zeros((10, 1)), np.zeros(10))
    st = init_state(ds, tiny_config(hidden=(16,), lr_actor_disc=1e-3), 0)
    rng = np.random.default_rng(0)
    for _ in range(600):
        discriminator_update(st, rng.normal(size=(128, 2)), rng.normal(size=(128, 2)))
    x = rng.normal(size=(4000, 2))
    out = 1 / (1 + np.exp(-st.disc(x)[:, 0]))
    assert 0.4 <= out.mean() <= 0.6


def _fake(st, dataset, seed=0):
    return build_fake_batch(st, MODEL, dataset.s[:12], np.random.default_rng(seed))


def test_actor_gradient(dataset):
    st = init_state(dataset, tiny_config(), 0)
    st.q_avg = 1.7
    fb = _fake(st, dataset)
    s = dataset.s[20:30]
    z = np.random.default_rng(3).standard_normal((10, st.actor.noise_dim))

    def fn_and_grad():
        loss, _, _, grads = actor_loss_and_grads(st, s, z, fb)
        return loss, grads
    assert gradient_check(fn_and_grad, st.actor.net.params) < 1e-4


def test_alpha_zero_is_generator_only(dataset):
    st = init_state(dataset, tiny_config(alpha=0.0), 0)
    st.q_avg = 2.0
    fb = _fake(st, dataset)
    s = dataset.s[:8]
    z = np.zeros((8, st.actor.noise_dim))
    full = actor_loss_and_grads(st, s, z, fb, use_q=True)
    gen_only = actor_loss_and_grads(st, s, z, fb, use_q=False)
    assert full[0] == gen_only[0]
    for a, b in zip(full[3], gen_only[3]):
        np.testing.assert_array_equal(a, b)


def test_lambda_halves(dataset):
    st = init_state(dataset, tiny_config(), 0)
    fb = _fake(st, dataset)
    b = batch_from(dataset, np.arange(8))
    st.q_avg = 3.0
    _, _, lam1 = actor_update(st, b, fb)
    st.q_avg = 6.0
    _, _, lam2 = actor_update(st, b, fb)
    assert lam2 == lam1 / 2
    for lam, q in st.lambda_log:
        assert lam * q == pytest.approx(st.config.alpha, rel=1e-15)


def test_soft_update_drift(dataset):
    st = init_state(dataset, tiny_config(), 0)
    st.critics[0].params[0] += 1.0
    st.actor.net.params[0] -= 0.5
    old_c = [p.copy() for p in st.critic_targets[0].params]
    old_a = [p.copy() for p in st.actor_target.params]
    soft_update_targets(st)
    beta = st.config.tau
    for new, old, src in zip(st.critic_targets[0].params, old_c, st.critics[0].params):
        assert np.abs(new - (beta * src + (1 - beta) * old)).max() == 0.0
    for new, old, src in zip(st.actor_target.params, old_a, st.actor.net.params):
        assert np.abs(new - (beta * src + (1 - beta) * old)).max() == 0.0


# --- training loop --------------------------------------------------------------------

def test_warm_start_leaves_critics(dataset):
    cfg = tiny_config(n_epochs=2, warm_epochs=2)
    init = init_state(dataset, cfg, 5)
    st, rows = train(dataset, MODEL, cfg, seed=5)
    for a, b in zip(init.critics + init.critic_targets, st.critics + st.critic_targets):
        for p, q in zip(a.params, b.params):
            np.testing.assert_array_equal(p, q)
    assert len(st.buffer) == 0 and st.env_fraction_log == [1.0] * 40
    assert all(np.isnan(r["critic_loss"]) for r in rows)


def test_determinism_and_log(dataset, tmp_path):
    cfg = tiny_config()
    _, rows1 = train(dataset, MODEL, cfg, seed=3, env=ENV, log_path=tmp_path / "a.csv")
    _, rows2 = train(dataset, MODEL, cfg, seed=3, env=ENV, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == METRIC_COLUMNS
    assert len(rows1) == cfg.n_epochs
    _, rows3 = train(dataset, MODEL, cfg, seed=4, env=ENV)
    assert rows3 != rows1


def test_lambda_identity_every_step(dataset):
    st, _ = train(dataset, MODEL, tiny_config(), seed=1)
    assert st.lambda_log
    for lam, q in st.lambda_log:
        assert lam * q == pytest.approx(10.0, rel=1e-15)


def test_train_needs_model(dataset):
    with pytest.raises(UntrainedEnsemble):
        train(dataset, None, tiny_config(), seed=0)
