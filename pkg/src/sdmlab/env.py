"""Built-in continuous test environment: a 2-d point mass that must reach a goal.

``s, a in [-1, 1]^2``; ``s' = clip(s + 0.1 a + N(0, 0.01^2))``; reward
``-||s - goal||``; an episode ends on reaching within 0.05 of the goal (a true
terminal, ``d = 1``) or after 200 steps (a time limit, recorded with ``d = 0``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset


@dataclass(frozen=True)
class PointMassEnv:
    goal: tuple = (0.5, 0.5)
    step_size: float = 0.1
    noise_std: float = 0.01
    goal_radius: float = 0.05
    max_steps: int = 200
    init_low: float = -1.0
    init_high: float = -0.2

    state_dim = 2
    action_dim = 2
    max_action = 1.0

    def reset(self, rng):
        return rng.uniform(self.init_low, self.init_high, size=self.state_dim)

    def reward(self, s):
        return -float(np.linalg.norm(s - np.asarray(self.goal)))

    def step(self, s, a, rng):
        a = np.clip(a, -self.max_action, self.max_action)
        s2 = np.clip(s + self.step_size * a + rng.normal(0.0, self.noise_std, size=self.state_dim), -1.0, 1.0)
        done = np.linalg.norm(s2 - np.asarray(self.goal)) < self.goal_radius
        return self.reward(s), s2, bool(done)


class ExactModel:
    """The true point-mass dynamics behind the ``sample`` interface of a learned model."""

    def __init__(self, env):
        self.env = env

    def sample(self, s, a, rng):
        env = self.env
        s = np.atleast_2d(s)
        a = np.clip(np.atleast_2d(a), -env.max_action, env.max_action)
        goal = np.asarray(env.goal)
        r = -np.linalg.norm(s - goal, axis=1)
        s2 = np.clip(s + env.step_size * a + rng.normal(0.0, env.noise_std, size=s.shape), -1.0, 1.0)
        return r, s2, np.linalg.norm(s2 - goal, axis=1) < env.goal_radius


class ControllerPolicy:
    """``a = clip(gain * (goal - s) + N(0, noise^2))``; the behaviour policy."""

    def __init__(self, env, gain=2.0, noise_std=0.3):
        self.env, self.gain, self.noise_std = env, gain, noise_std

    def act(self, s, rng):
        a = self.gain * (np.asarray(self.env.goal) - s)
        if self.noise_std > 0:
            a = a + rng.normal(0.0, self.noise_std, size=a.shape)
        return np.clip(a, -self.env.max_action, self.env.max_action)


class RandomPolicy:
    def __init__(self, env):
        self.env = env

    def act(self, s, rng):
        return rng.uniform(-self.env.max_action, self.env.max_action, size=np.shape(s)[:-1] + (self.env.action_dim,))


def run_episode(env, policy, rng):
    s = env.reset(rng)
    total = 0.0
    for _ in range(env.max_steps):
        a = policy.act(s, rng)
        r, s, done = env.step(s, a, rng)
        total += r
        if done:
            break
    return total


def evaluate_policy(env, policy, episodes=10, seed=0):
    """Mean / std of undiscounted returns over ``episodes`` independently seeded episodes."""
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    returns = np.array([run_episode(env, policy, np.random.default_rng(ss)) for ss in seeds])
    return {"mean": float(returns.mean()), "std": float(returns.std()), "returns": returns.tolist()}


def reference_returns(env, episodes=10, seed=0):
    """Returns of the random and noiseless-controller policies, used for normalising."""
    return {
        "random": evaluate_policy(env, RandomPolicy(env), episodes, seed)["mean"],
        "expert": evaluate_policy(env, ControllerPolicy(env, gain=10.0, noise_std=0.0), episodes, seed)["mean"],
    }


def normalized(ret, refs):
    return (ret - refs["random"]) / (refs["expert"] - refs["random"])


def collect_dataset(env, policy, n_transitions, seed, behavior="controller gain=2.0 noise=0.3"):
    rng = np.random.default_rng(seed)
    S, A, R, S2, D = [], [], [], [], []
    episodes = 0
    while len(R) < n_transitions:
        s = env.reset(rng)
        episodes += 1
        for _ in range(env.max_steps):
            a = policy.act(s, rng)
            r, s2, done = env.step(s, a, rng)
            S.append(s)
            A.append(a)
            R.append(r)
            S2.append(s2)
            D.append(done)
            s = s2
            if done or len(R) >= n_transitions:
                break
    meta = {"kind": "continuous", "state_dim": env.state_dim, "action_dim": env.action_dim,
            "seed": seed, "behavior": behavior, "episodes": episodes, "env": "pointmass"}
    return Dataset.continuous(np.array(S), np.array(A), R, np.array(S2), D, meta)
