"""Average reward and differential (relative) action values on tabular MDPs.

The reward is an arbitrary table ``g[s, a]`` rather than the MDP's own reward,
since the bound checks range over a whole dictionary of test functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NumericalError
from .mdp import chain_matrix, stationary_distribution

PIN = "E_{d_pi}[Q] = 0"


@dataclass(frozen=True)
class DifferentialValue:
    q: np.ndarray  # Q[s, a]
    eta: float
    d: np.ndarray  # stationary distribution used for eta and the pin
    pin: str = PIN


def average_reward_and_bias(mdp_or_transition, policy, g):
    P = getattr(mdp_or_transition, "transition", mdp_or_transition)
    pi = getattr(policy, "probs", policy)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != P.shape[:2]:
        raise DimensionMismatch(f"g shape {g.shape} != {P.shape[:2]}")
    d = stationary_distribution(P, pi).flat
    M = chain_matrix(P, pi)
    return _solve(M, d, g)


def _solve(M, d, g):
    """Least-squares solve of ``(I - M) q = g - eta`` stacked with ``d . q = 0``."""
    n = M.shape[0]
    gf = g.ravel()
    eta = float(d @ gf)
    lhs = np.vstack([np.eye(n) - M, d[None, :]])
    rhs = np.concatenate([gf - eta, [0.0]])
    q, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    resid = np.abs(lhs @ q - rhs).max()
    scale = max(1.0, np.abs(gf).max())
    if resid > 1e-9 * scale:
        raise NumericalError(f"differential value solve residual {resid:.3e}")
    return DifferentialValue(q.reshape(g.shape), eta, d.reshape(g.shape))


def bellman_residual(mdp_or_transition, policy, dv, g):
    """``max |Q - g - E[Q(s', a')] + eta|`` over all state-action pairs."""
    P = getattr(mdp_or_transition, "transition", mdp_or_transition)
    pi = getattr(policy, "probs", policy)
    q = np.asarray(getattr(dv, "q", dv), dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.shape != P.shape[:2] or g.shape != P.shape[:2]:
        raise DimensionMismatch(f"Q {q.shape} / g {g.shape} do not match {P.shape[:2]}")
    M = chain_matrix(P, pi)
    r = q.ravel() - g.ravel() - M @ q.ravel() + dv.eta
    return float(np.abs(r).max())


def next_expectation(mdp_or_transition, policy, f):
    """``(s, a) -> E_{s' ~ P(.|s,a), a' ~ pi(.|s')}[f(s', a')]`` as a table."""
    P = getattr(mdp_or_transition, "transition", mdp_or_transition)
    pi = getattr(policy, "probs", policy)
    return (chain_matrix(P, pi) @ np.asarray(f).ravel()).reshape(P.shape[:2])
