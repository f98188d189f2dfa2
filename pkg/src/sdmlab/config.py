"""Trainer / toy-experiment hyperparameters and the layered config loader
(defaults < YAML file < ``--set key=value`` overrides)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .ensemble import EnsembleConfig
from .errors import ConfigError


@dataclass
class TrainerConfig:
    alpha: float = 10.0
    f_real: float = 0.5
    horizon: int = 1
    gamma: float = 0.99
    tau: float = 0.005
    c_min_weight: float = 0.75
    policy_freq: int = 2
    n_smooth: int = 50  # N_B
    sigma_smooth: float = 3e-4  # sigma_B
    sigma_fake: float = 3e-4  # sigma_J
    n_actions_per_state: int = 1  # N_a
    batch_size: int = 512
    lr_critic: float = 3e-4
    lr_actor_disc: float = 2e-4
    adam_beta1_actor_disc: float = 0.4
    warm_epochs: int = 40
    noise_dim: int | None = None  # None: min(10, state_dim // 2)
    label_smooth_low: float = 0.8
    label_smooth_high: float = 1.0
    label_smoothing: bool = True
    rollout_freq: int = 250
    rollout_batch: int = 128
    rollout_retain_epochs: int = 5
    q_cutoff: float = 2000.0
    huber_threshold: float = 500.0
    reward_clamp_sigmas: float = 3.0
    critic_threshold_rate: float = 0.05
    critic_threshold_sigmas: float = 3.0
    generator_loss: str = "nonsaturating"  # or "minimax"
    epoch_length: int = 1000
    n_epochs: int = 1000
    eval_episodes: int = 10
    hidden: tuple = (400, 300)
    slope: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        checks = [
            (0.0 <= self.f_real <= 1.0, "f_real", "must be in [0, 1]"),
            (self.horizon >= 1, "horizon", "must be >= 1"),
            (0.0 < self.gamma <= 1.0, "gamma", "must be in (0, 1]"),
            (0.0 < self.tau <= 1.0, "tau", "must be in (0, 1]"),
            (0.0 <= self.c_min_weight <= 1.0, "c_min_weight", "must be in [0, 1]"),
            (self.policy_freq >= 1, "policy_freq", "must be >= 1"),
            (self.n_smooth >= 1, "n_smooth", "must be >= 1"),
            (self.n_actions_per_state >= 1, "n_actions_per_state", "must be >= 1"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (0.0 <= self.label_smooth_low <= self.label_smooth_high <= 1.0, "label_smooth_low",
             "need 0 <= low <= high <= 1"),
            (self.generator_loss in ("nonsaturating", "minimax"), "generator_loss",
             "must be 'nonsaturating' or 'minimax'"),
            (self.alpha >= 0, "alpha", "must be >= 0"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(msg, key=f"trainer.{key}")

    def noise_dim_for(self, state_dim):
        return self.noise_dim if self.noise_dim is not None else max(1, min(10, state_dim // 2))


@dataclass
class ToyConfig:
    dim: int = 128
    noise_dim: int = 2
    batch_size: int = 256
    critic_iters: int = 5
    label_smooth: float = 0.9
    n_iters: int = 100_000
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    coverage_x_max: float = 3.5
    coverage_samples: int = 256
    coverage_n_x: int = 500


@dataclass
class EnvConfig:
    n_transitions: int = 20_000
    behavior_gain: float = 2.0
    behavior_noise: float = 0.3


@dataclass
class RunConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def to_dict(self):
        out = asdict(self)
        for section in out.values():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return out


SECTIONS = {"trainer": TrainerConfig, "ensemble": EnsembleConfig, "toy": ToyConfig, "env": EnvConfig}


def _coerce(value, current, key):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {value!r}: {exc}", key=key) from None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=key)
    elif isinstance(current, int) and value is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=key)
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=key)
        value = float(value)
    elif isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key=key)
        value = tuple(value)
    return value


def _merge(raw, tree, source):
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError("unknown section", key=section)
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError("section must be a mapping", key=section)
        names = {f.name for f in fields(SECTIONS[section])}
        for k, v in values.items():
            if k not in names:
                raise ConfigError("unknown key", key=f"{section}.{k}")
            tree[section][k] = _coerce(v, tree[section][k], f"{section}.{k}")


def load_config(path=None, overrides=()):
    tree = {name: asdict(cls()) for name, cls in SECTIONS.items()}
    for sec in tree.values():
        for k, v in sec.items():
            if isinstance(v, list):
                sec[k] = tuple(v)
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        _merge(raw, tree, str(path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", key=key or item)
        section, name = key.split(".", 1)
        _merge({section: {name: value}}, tree, "--set")
    try:
        return RunConfig(**{name: SECTIONS[name](**vals) for name, vals in tree.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
