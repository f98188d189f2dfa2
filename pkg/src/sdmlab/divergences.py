"""Distances between distributions on a finite space: TV, KL, JSD and integral
probability metrics over finite function dictionaries or the sup-norm ball."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyDictionary, NegativeBound, SupportViolation

KINDS = ("TV", "KL", "JSD")


def _flat(p):
    return np.asarray(getattr(p, "probs", p), dtype=np.float64).ravel()


def _pair(p, q):
    p, q = _flat(p), _flat(q)
    if p.shape != q.shape:
        raise DimensionMismatch(f"{p.shape} vs {q.shape}")
    return p, q


def kl(p, q):
    p, q = _pair(p, q)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportViolation("KL(p||q) undefined: q = 0 where p > 0")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tv(p, q):
    p, q = _pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def jsd(p, q):
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def divergence(p, q, kind="TV"):
    kind = kind.upper()
    if kind == "TV":
        return tv(p, q)
    if kind == "KL":
        return kl(p, q)
    if kind == "JSD":
        return jsd(p, q)
    raise ValueError(f"unknown divergence kind {kind!r}; expected one of {KINDS}")


def row_tv(P, Q):
    """TV between matching conditional rows ``P[..., :]`` and ``Q[..., :]``."""
    return 0.5 * np.abs(np.asarray(P) - np.asarray(Q)).sum(axis=-1)


def row_kl(P, Q):
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    mask = P > 0
    if np.any(Q[mask] <= 0):
        raise SupportViolation("row KL undefined: model assigns 0 to a reachable next state")
    safe_q = np.where(mask, Q, 1.0)
    safe_p = np.where(mask, P, 1.0)
    return np.sum(np.where(mask, P * np.log(safe_p / safe_q), 0.0), axis=-1)


@dataclass(frozen=True)
class FunctionDictionary:
    members: np.ndarray  # (K, S, A)
    g_max: float

    def __post_init__(self):
        m = np.asarray(self.members, dtype=np.float64)
        if m.ndim == 2:
            m = m[:, :, None]
        object.__setattr__(self, "members", m)
        if m.size and np.abs(m).max() > self.g_max * (1 + 1e-12):
            raise NegativeBound(f"member sup-norm {np.abs(m).max()} exceeds g_max={self.g_max}")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def flat(self):
        return self.members.reshape(len(self.members), -1)

    @classmethod
    def default(cls, rng, n_states, n_actions, g_max=1.0, n_random=64):
        """``n_random`` uniform tables plus the ``±g_max`` coordinate indicators."""
        shape = (n_states, n_actions)
        random = rng.uniform(-g_max, g_max, size=(n_random, *shape))
        n = n_states * n_actions
        eye = np.eye(n).reshape(n, *shape)
        return cls(np.concatenate([random, g_max * eye, -g_max * eye]), g_max)

    @classmethod
    def sign_patterns(cls, n_states, n_actions, g_max=1.0):
        n = n_states * n_actions
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
        return cls(g_max * signs.reshape(-1, n_states, n_actions), g_max)


def ipm_dictionary(p, q, dictionary):
    """``max_g |E_p g - E_q g|`` with lowest-index tie-breaking."""
    if len(dictionary) == 0:
        raise EmptyDictionary("IPM over an empty dictionary")
    p, q = _pair(p, q)
    G = dictionary.flat
    if G.shape[1] != p.size:
        raise DimensionMismatch(f"dictionary members have {G.shape[1]} entries, distributions {p.size}")
    gaps = np.abs(G @ (p - q))
    idx = int(np.argmax(gaps))
    return float(gaps[idx]), idx


def ipm_supnorm(p, q, g_max):
    """IPM over ``{g : ||g||_inf <= g_max}``, i.e. ``g_max * ||p - q||_1``."""
    if g_max < 0:
        raise NegativeBound(f"g_max must be >= 0, got {g_max}")
    p, q = _pair(p, q)
    return float(g_max * np.abs(p - q).sum())
