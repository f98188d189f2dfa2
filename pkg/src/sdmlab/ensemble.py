"""Probabilistic dynamics ensemble: Gaussian heads over normalised
``(reward, state delta)`` plus a termination logit sharing the same trunk."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import TooFewSamples, UntrainedEnsemble, ValidationError
from .nn import AdamState, Mlp, gaussian_nll, params_hash, sigmoid, weighted_bce_logits


@dataclass
class EnsembleConfig:
    n_members: int = 7
    n_elites: int = 5
    hidden: tuple = (400, 300)
    slope: float = 0.01
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    holdout_ratio: float = 0.2
    max_holdout: int = 1000
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    termination_cutoff: float = 0.5

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 1 <= self.n_elites <= self.n_members:
            raise ValidationError(f"need 1 <= n_elites <= n_members, got {self.n_elites}/{self.n_members}")
        if self.log_std_min >= self.log_std_max:
            raise ValidationError("log_std_min must be < log_std_max")


@dataclass
class NormStats:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @staticmethod
    def _std(x):
        s = x.std(axis=0)
        return np.where(s < 1e-12, 1.0, s)

    @classmethod
    def fit(cls, inputs, targets):
        return cls(inputs.mean(axis=0), cls._std(inputs), targets.mean(axis=0), cls._std(targets))

    def norm_in(self, x):
        return (x - self.in_mean) / self.in_std

    def norm_out(self, y):
        return (y - self.out_mean) / self.out_std

    def denorm_out(self, y):
        return y * self.out_std + self.out_mean


@dataclass
class DynamicsEnsemble:
    members: list
    elites: list
    norm: NormStats
    state_dim: int
    action_dim: int
    config: EnsembleConfig
    val_losses: list = field(default_factory=list)

    @property
    def out_dim(self):
        return 1 + self.state_dim

    def heads(self, net, x_norm):
        """Split raw output into ``(mean, clipped log-std, raw log-std, term logit)``."""
        out = net(x_norm)
        k = self.out_dim
        raw = out[:, k:2 * k]
        log_std = np.clip(raw, self.config.log_std_min, self.config.log_std_max)
        return out[:, :k], log_std, raw, out[:, 2 * k]

    def predict(self, s, a, member):
        """Denormalised mean of ``(r, delta s)``, log-std in normalised units, termination prob."""
        x = self.norm.norm_in(np.concatenate([s, a], axis=1))
        mean, log_std, _, logit = self.heads(self.members[member], x)
        return self.norm.denorm_out(mean), log_std, sigmoid(logit)

    def to_json(self):
        body = {
            "members": [m.to_json() for m in self.members],
            "elites": list(self.elites),
            "norm": {k: v.tolist() for k, v in asdict(self.norm).items()},
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "config": asdict(self.config),
            "val_losses": list(self.val_losses),
        }
        body["config_hash"] = params_hash(body["config"])
        return body

    @classmethod
    def from_json(cls, obj):
        cfg = EnsembleConfig(**obj["config"])
        norm = NormStats(**{k: np.asarray(v) for k, v in obj["norm"].items()})
        return cls([Mlp.from_json(m) for m in obj["members"]], list(obj["elites"]), norm,
                   obj["state_dim"], obj["action_dim"], cfg, list(obj.get("val_losses", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def _member_loss(ens, net, x, y, done, pos_weight):
    """Gaussian NLL + weighted BCE and the gradient w.r.t. ``net.params``."""
    out, cache = net.forward(x)
    k = ens.out_dim
    mean, raw, logit = out[:, :k], out[:, k:2 * k], out[:, 2 * k]
    log_std = np.clip(raw, ens.config.log_std_min, ens.config.log_std_max)
    nll, g_mean, g_ls = gaussian_nll(mean, log_std, y)
    g_ls = g_ls * ((raw >= ens.config.log_std_min) & (raw <= ens.config.log_std_max))
    bce, g_logit = weighted_bce_logits(logit, done, pos_weight)
    grad_out = np.concatenate([g_mean, g_ls, g_logit[:, None]], axis=1)
    grads, _ = net.backward(cache, grad_out)
    return nll + bce, grads


def _validation_loss(ens, net, x, y, done, pos_weight):
    """Mean-prediction MSE plus weighted BCE on the shared holdout split."""
    out = net(x)
    k = ens.out_dim
    mse = float(np.mean((out[:, :k] - y) ** 2))
    bce, _ = weighted_bce_logits(out[:, 2 * k], done, pos_weight)
    return mse + bce


def train_dynamics_ensemble(dataset, config=None, seed=0):
    config = config or EnsembleConfig()
    if dataset.kind != "continuous":
        raise ValidationError("dynamics ensemble needs a continuous dataset")
    n = len(dataset)
    if n < 10:
        raise TooFewSamples(f"need at least 10 transitions, got {n}")
    rng = np.random.default_rng(seed)
    s, a = dataset.s, dataset.a
    inputs = np.concatenate([s, a], axis=1)
    targets = np.concatenate([dataset.r[:, None], dataset.s2 - s], axis=1)
    done = dataset.d.astype(np.float64)
    norm = NormStats.fit(inputs, targets)
    x_all, y_all = norm.norm_in(inputs), norm.norm_out(targets)
    n_term = done.sum()
    pos_weight = (n - n_term) / n_term if n_term > 0 else 1.0

    perm = rng.permutation(n)
    n_hold = min(config.max_holdout, max(1, int(round(config.holdout_ratio * n))))
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) < 2:
        raise TooFewSamples("no training samples left after the holdout split")

    ds, da = s.shape[1], a.shape[1]
    sizes = (ds + da, *config.hidden, 2 * (1 + ds) + 1)
    members = [Mlp(sizes, config.slope, rng=rng) for _ in range(config.n_members)]
    ens = DynamicsEnsemble(members, [], norm, ds, da, config)

    val = []
    for net in members:
        boot = train[rng.integers(0, len(train), size=len(train))]
        opt = AdamState.for_params(net.params, lr=config.lr)
        best = _validation_loss(ens, net, x_all[hold], y_all[hold], done[hold], pos_weight)
        best_params = [p.copy() for p in net.params]
        stale = 0
        for _ in range(config.max_epochs):
            order = boot[rng.permutation(len(boot))]
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                _, grads = _member_loss(ens, net, x_all[idx], y_all[idx], done[idx], pos_weight)
                opt.step(net.params, grads)
            loss = _validation_loss(ens, net, x_all[hold], y_all[hold], done[hold], pos_weight)
            if loss < best - 0.01 * abs(best):
                best, best_params, stale = loss, [p.copy() for p in net.params], 0
            else:
                if loss < best:
                    best, best_params = loss, [p.copy() for p in net.params]
                stale += 1
                if stale >= config.patience:
                    break
        net.params = best_params
        val.append(float(best))
    ens.val_losses = val
    ens.elites = select_elites(val, config.n_elites)
    return ens


def select_elites(losses, n_elites):
    """Indices of the ``n_elites`` lowest losses; ties go to the lower index."""
    return sorted(np.argsort(np.asarray(losses), kind="stable")[:n_elites].tolist())


def ensemble_sample(ens, s, a, rng):
    """One model step per row: uniform elite, Gaussian draw, 0.5 termination cutoff."""
    if ens is None or not ens.elites:
        raise UntrainedEnsemble("ensemble has no elites; train it first")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    x = ens.norm.norm_in(np.concatenate([s, a], axis=1))
    pick = rng.integers(0, len(ens.elites), size=len(s))
    noise = rng.standard_normal((len(s), ens.out_dim))
    y = np.empty((len(s), ens.out_dim))
    p_term = np.empty(len(s))
    for j, member in enumerate(ens.elites):
        rows = pick == j
        if not rows.any():
            continue
        mean, log_std, _, logit = ens.heads(ens.members[member], x[rows])
        y[rows] = mean + np.exp(log_std) * noise[rows]
        p_term[rows] = sigmoid(logit)
    y = ens.norm.denorm_out(y)
    return y[:, 0], s + y[:, 1:], p_term >= ens.config.termination_cutoff
