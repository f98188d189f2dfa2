import numpy as np
import pytest

from sdmlab.data import Dataset
from sdmlab.ensemble import (DynamicsEnsemble, EnsembleConfig, _member_loss, ensemble_sample, select_elites,
                             train_dynamics_ensemble)
from sdmlab.errors import TooFewSamples, UntrainedEnsemble, ValidationError
from sdmlab.nn import Mlp, gradient_check

SMALL = dict(hidden=(32, 32), max_epochs=60, patience=10, n_members=3, n_elites=2, batch_size=64)


def linear_data(n=600, seed=0, done=None):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 1))
    s2 = s + 0.1 * np.concatenate([a, -a], axis=1) + 0.05 * s
    r = s[:, 0] - 0.5 * a[:, 0]
    d = np.zeros(n, bool) if done is None else done
    return Dataset.continuous(s, a, r, s2, d)


def test_defaults():
    cfg = EnsembleConfig()
    assert cfg.n_members == 7 and cfg.n_elites == 5
    with pytest.raises(ValidationError):
        EnsembleConfig(n_members=3, n_elites=4)


def test_too_few():
    with pytest.raises(TooFewSamples):
        train_dynamics_ensemble(linear_data(5))


@pytest.fixture(scope="module")
def fitted():
    # long fit without early stopping so the variance head reaches the clamp
    return train_dynamics_ensemble(linear_data(), EnsembleConfig(**{**SMALL, "max_epochs": 300, "patience": 300}),
                                   seed=0)


def test_linear_fit(fitted):
    ens = fitted
    test = linear_data(300, seed=1)
    x = ens.norm.norm_in(np.concatenate([test.s, test.a], axis=1))
    y = ens.norm.norm_out(np.concatenate([test.r[:, None], test.s2 - test.s], axis=1))
    best = ens.elites[int(np.argmin([ens.val_losses[i] for i in ens.elites]))]
    mean, log_std, _, logit = ens.heads(ens.members[best], x)
    assert np.sqrt(np.mean((mean - y) ** 2)) < 0.05
    # noiseless data drives the predicted log-std to the floor
    assert np.median(log_std) == ens.config.log_std_min
    assert (logit < 0).all()  # all labels 0 -> termination prob < 0.5


def test_elites():
    assert select_elites([0.3, 0.1, 0.1, 0.5], 2) == [1, 2]
    assert select_elites([0.2, 0.2, 0.2], 2) == [0, 1]


def test_member_loss_gradient():
    ds = linear_data(40, done=np.arange(40) % 7 == 0)
    ens = DynamicsEnsemble([], [], None, 2, 1, EnsembleConfig(hidden=(6,)))
    rng = np.random.default_rng(0)
    net = Mlp((3, 6, 2 * 3 + 1), rng=rng)
    x = np.concatenate([ds.s, ds.a], axis=1)
    y = np.concatenate([ds.r[:, None], ds.s2 - ds.s], axis=1)
    err = gradient_check(lambda: _member_loss(ens, net, x, y, ds.d.astype(float), 6.0), net.params)
    assert err < 1e-4


def test_sample_reproducible_and_floor(fitted):
    ens = fitted
    s = np.zeros((4, 2))
    a = np.zeros((4, 1))
    r1 = ensemble_sample(ens, s, a, np.random.default_rng(3))
    r2 = ensemble_sample(ens, s, a, np.random.default_rng(3))
    for u, v in zip(r1, r2):
        np.testing.assert_array_equal(u, v)


def test_sample_floor_bound():
    ens = train_dynamics_ensemble(linear_data(), EnsembleConfig(**{**SMALL, "max_epochs": 1}), seed=0)
    k = ens.out_dim
    for m in ens.members:
        m.params[-1][k:2 * k] = -100.0  # force every log-std to the clamp floor
    s, a = np.zeros((50, 2)), np.full((50, 1), 0.3)
    r, s2, _ = ensemble_sample(ens, s, a, np.random.default_rng(0))
    bound = 6 * np.exp(ens.config.log_std_min) * ens.norm.out_std
    for j in range(50):
        means = [ens.predict(s[j:j + 1], a[j:j + 1], e)[0][0] for e in ens.elites]
        y = np.concatenate([[r[j]], s2[j] - s[j]])
        assert min(np.abs(y - m).max() for m in means) <= bound.max()


def test_monte_carlo_mean(fitted):
    ens = fitted
    ens1 = DynamicsEnsemble(ens.members, [ens.elites[0]], ens.norm, 2, 1, ens.config)
    s, a = np.full((10_000, 2), 0.2), np.full((10_000, 1), -0.4)
    r, s2, _ = ensemble_sample(ens1, s, a, np.random.default_rng(1))
    mean, log_std, _ = ens1.predict(s[:1], a[:1], ens1.elites[0])
    std = np.exp(log_std[0]) * ens.norm.out_std
    y = np.concatenate([r[:, None], s2 - s], axis=1)
    se = std / np.sqrt(len(y))
    assert np.all(np.abs(y.mean(axis=0) - mean[0]) <= 4 * se)


def test_untrained():
    with pytest.raises(UntrainedEnsemble):
        ensemble_sample(None, np.zeros((1, 2)), np.zeros((1, 1)), np.random.default_rng(0))


def test_save_load(tmp_path, fitted):
    fitted.save(tmp_path / "e.json")
    back = DynamicsEnsemble.load(tmp_path / "e.json")
    rng1, rng2 = np.random.default_rng(0), np.random.default_rng(0)
    s, a = np.zeros((3, 2)), np.zeros((3, 1))
    np.testing.assert_array_equal(ensemble_sample(fitted, s, a, rng1)[1], ensemble_sample(back, s, a, rng2)[1])
