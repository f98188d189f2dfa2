"""Finite MDPs, the state-action Markov chain a policy induces on them, and its
exact undiscounted stationary distribution.

State-action pairs are flattened row-major, ``index = s * n_actions + a``, so a
table ``x[s][a]`` and its flat vector ``x.ravel()`` line up everywhere.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DimensionMismatch,
    NegativeProbability,
    NonStochasticRow,
    NotIrreducible,
    Periodic,
)

ROW_TOL = 1e-9


def _check_rows(table, name):
    table = np.asarray(table, dtype=np.float64)
    if np.any(table < 0):
        idx = tuple(int(i) for i in np.argwhere(table < 0)[0])
        raise NegativeProbability(f"{name}{list(idx)} = {table[idx]!r} < 0")
    sums = table.sum(axis=-1)
    bad = np.abs(sums - 1.0) > ROW_TOL
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonStochasticRow(f"{name}{list(idx)} sums to {sums[idx]!r}")
    return table


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # r[s, a]
    initial_dist: np.ndarray
    discount: float = 1.0
    r_max: float = field(default=0.0)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def to_json(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "discount": self.discount,
        }


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        object.__setattr__(self, "probs", _check_rows(self.probs, "policy"))

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_logits(cls, logits):
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return cls(p / p.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class StateActionDist:
    probs: np.ndarray  # d[s, a]

    @property
    def flat(self):
        return self.probs.ravel()

    def state_marginal(self):
        return self.probs.sum(axis=1)


def build_mdp(transition, reward, initial_dist, discount=1.0, n_states=None, n_actions=None):
    """Validate raw tables and return a :class:`TabularMdp`.

    ``n_states`` / ``n_actions`` are optional cross-checks as they appear in the
    JSON file format.
    """
    P = np.asarray(transition, dtype=np.float64)
    r = np.asarray(reward, dtype=np.float64)
    mu0 = np.asarray(initial_dist, dtype=np.float64)
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise DimensionMismatch(f"transition must be [S][A][S], got shape {P.shape}")
    S, A, _ = P.shape
    if (n_states is not None and n_states != S) or (n_actions is not None and n_actions != A):
        raise DimensionMismatch(
            f"declared ({n_states}, {n_actions}) but transition is ({S}, {A})")
    if r.shape != (S, A):
        raise DimensionMismatch(f"reward shape {r.shape} != {(S, A)}")
    if mu0.shape != (S,):
        raise DimensionMismatch(f"initial_dist shape {mu0.shape} != {(S,)}")
    if not np.all(np.isfinite(r)):
        raise DimensionMismatch("reward contains non-finite entries")
    if not (0.0 < discount <= 1.0):
        raise DimensionMismatch(f"discount must be in (0, 1], got {discount}")
    P = _check_rows(P, "transition")
    mu0 = _check_rows(mu0, "initial_dist")
    r_max = float(np.abs(r).max()) if r.size else 0.0
    return TabularMdp(P, r, mu0, float(discount), r_max)


def load_mdp(path):
    raw = json.loads(Path(path).read_text())
    try:
        return build_mdp(raw["transition"], raw["reward"], raw["initial_dist"],
                         raw.get("discount", 1.0), raw.get("n_states"), raw.get("n_actions"))
    except KeyError as exc:
        raise DimensionMismatch(f"MDP file missing field {exc}") from None


def save_mdp(mdp, path):
    Path(path).write_text(json.dumps(mdp.to_json()))


def _dims(transition, probs):
    S, A = transition.shape[:2]
    if probs.shape != (S, A):
        raise DimensionMismatch(f"policy shape {probs.shape} != {(S, A)}")
    return S, A


def chain_matrix(mdp_or_transition, policy):
    """Row-stochastic ``M[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')``."""
    P = getattr(mdp_or_transition, "transition", mdp_or_transition)
    pi = getattr(policy, "probs", policy)
    S, A = _dims(P, pi)
    return (P[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)


def _period(adj, members):
    # BFS levels inside one strongly connected class; the period is the gcd of
    # level[u] + 1 - level[v] over the class's internal edges.
    members = list(members)
    inside = set(members)
    level = {members[0]: 0}
    frontier = [members[0]]
    g = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in inside:
                    continue
                if v not in level:
                    level[v] = level[u] + 1
                    nxt.append(v)
                else:
                    g = math.gcd(g, level[u] + 1 - level[v])
        frontier = nxt
    return abs(g)


def check_ergodic(M):
    """Raise unless the chain has exactly one closed class and it is aperiodic.

    Returns the indices of the closed (recurrent) class.
    """
    support = np.asarray(M) > 0
    n_comp, labels = connected_components(csr_matrix(support), directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        if not np.any(support[members][:, labels != c]):
            closed.append(members)
    if len(closed) != 1:
        raise NotIrreducible(f"chain has {len(closed)} closed communicating classes")
    members = closed[0]
    adj = [np.flatnonzero(row) for row in support]
    period = _period(adj, members)
    if period != 1:
        raise Periodic(f"recurrent class has period {period}")
    return members


def stationary_distribution(mdp_or_transition, policy):
    """Unique ``d`` with ``d M = d`` and ``sum(d) = 1``, by direct linear solve."""
    P = getattr(mdp_or_transition, "transition", mdp_or_transition)
    pi = getattr(policy, "probs", policy)
    S, A = _dims(P, pi)
    M = chain_matrix(P, pi)
    check_ergodic(M)
    n = S * A
    lhs = M.T - np.eye(n)
    lhs[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    d = np.linalg.solve(lhs, rhs)
    d = np.where(np.abs(d) < 1e-15, 0.0, d)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return StateActionDist(d.reshape(S, A))


def balance_residual(M, d):
    return float(np.abs(d @ M - d).max())


def random_mdp(rng, n_states, n_actions, concentration=1.0, reward_scale=1.0):
    """Dense random MDP: all transition entries positive, hence ergodic under any policy."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    r = rng.uniform(-reward_scale, reward_scale, size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    return build_mdp(P, r, mu0)


def random_policy(rng, n_states, n_actions, concentration=1.0):
    return TabularPolicy(rng.dirichlet(np.full(n_actions, concentration), size=n_states))
