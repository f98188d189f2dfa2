"""Exact checks of the stationary-distribution matching bounds on tabular
instances, the smoothed tabular MLE model, and a small regularized policy
improvement routine that uses the same quantities.

Notation used in field names: ``d_b`` is the behavior policy's stationary
distribution under the true dynamics, ``d_hat`` the target policy's under the
model, ``d_star`` the target policy's under the true dynamics. For a test
function ``g`` the model-side differential value is ``f``; ``v(s) = E_pi f``;
``err(s, a) = E_{P_hat}[v] - E_{P*}[v]``; ``psi`` is the differential value of
``err`` under the true dynamics.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .avgreward import average_reward_and_bias
from .data import empirical_distribution
from .divergences import FunctionDictionary, ipm_supnorm, row_kl, row_tv
from .errors import CoverageError, EmptyDataset, ValidationError
from .mdp import (
    TabularPolicy,
    _check_rows,
    chain_matrix,
    random_mdp,
    random_policy,
    stationary_distribution,
)

SLACK = -1e-9
IDENTITY_TOL = 1e-8


@dataclass(frozen=True)
class TabularModel:
    transition: np.ndarray
    counts: np.ndarray  # (S, A, S) visit counts, zeros if not fitted from data

    def __post_init__(self):
        object.__setattr__(self, "transition", _check_rows(self.transition, "model"))


def mle_tabular_model(dataset, smoothing=1e-2, n_states=None, n_actions=None):
    """Smoothed count model ``(N(s,a,s') + eps) / (N(s,a) + eps * S)``."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot fit a model to an empty dataset")
    if smoothing <= 0:
        raise ValidationError(f"smoothing must be > 0, got {smoothing}")
    S = n_states or dataset.meta["n_states"]
    A = n_actions or dataset.meta["n_actions"]
    counts = np.zeros((S, A, S))
    np.add.at(counts, (dataset.s, dataset.a, dataset.s2), 1.0)
    P = (counts + smoothing) / (counts.sum(axis=2, keepdims=True) + smoothing * S)
    return TabularModel(P, counts)


def _transition(x):
    return getattr(x, "transition", x)


def construct_F_member(dynamics, policy, g):
    """Differential value of reward ``g`` under ``(policy, dynamics)``."""
    return average_reward_and_bias(_transition(dynamics), policy, g)


@dataclass
class BoundReport:
    lhs_thm31_def: float = math.nan
    lhs_thm31_cov: float = math.nan
    per_g_gap: float = math.nan
    lhs_thm32: float = math.nan
    term_circ1: float = math.nan
    term_circ2: float = math.nan
    term_circ1_tv: float = math.nan
    term_circ1_kl: float = math.nan
    term_circ1_span: float = math.nan
    r_psi: float = math.nan
    circ2_rpsi_gap: float = math.nan
    f_max: float = math.nan
    psi_max: float = math.nan
    g_max: float = math.nan
    rhs_thm32: float = math.nan
    lhs_thm34: float = math.nan
    combined_rhs_thm34: float = math.nan
    kl_term: float = math.nan
    holds: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)

    @property
    def all_hold(self):
        return all(self.holds.values())


class _Instance:
    """All exact quantities for one ``(P*, P_hat, pi_b, pi, dictionary)``."""

    def __init__(self, true_mdp, model, pi_b, pi, dictionary):
        self.P = _transition(true_mdp)
        self.P_hat = _transition(model)
        self.pi_b = getattr(pi_b, "probs", pi_b)
        self.pi = getattr(pi, "probs", pi)
        self.G = dictionary
        self.shape = self.P.shape[:2]
        self.d_b = stationary_distribution(self.P, self.pi_b).flat
        self.d_hat = stationary_distribution(self.P_hat, self.pi).flat
        self.M_hat = chain_matrix(self.P_hat, self.pi)
        self.M_star = chain_matrix(self.P, self.pi)
        self._f = None

    @property
    def f_members(self):
        if self._f is None:
            self._f = [construct_F_member(self.P_hat, self.pi, g) for g in self.G]
        return self._f


def verify_theorem31(true_mdp, model, pi_b, pi, dictionary, report=None, _inst=None):
    """Per test function, the stationary gap ``|E_{d_b} g - eta_hat|`` equals the
    one-step form ``|E_{d_b}[f] - E_{d_b, P_hat, pi}[f(s', a')]|``."""
    inst = _inst or _Instance(true_mdp, model, pi_b, pi, dictionary)
    report = report or BoundReport()
    defs, covs = [], []
    for g, fv in zip(inst.G, inst.f_members):
        f = fv.q.ravel()
        defs.append(abs(inst.d_b @ g.ravel() - fv.eta))
        covs.append(abs(inst.d_b @ f - inst.d_b @ (inst.M_hat @ f)))
    defs, covs = np.array(defs), np.array(covs)
    report.lhs_thm31_def = float(defs.max())
    report.lhs_thm31_cov = float(covs.max())
    report.per_g_gap = float(np.abs(defs - covs).max())
    report.g_max = float(inst.G.g_max)
    report.holds["thm31_identity"] = bool(report.per_g_gap < IDENTITY_TOL)
    return report


def verify_theorem32(true_mdp, model, pi_b, pi, dictionary, report=None, _inst=None):
    inst = _inst or _Instance(true_mdp, model, pi_b, pi, dictionary)
    report = report or BoundReport()
    d_star = stationary_distribution(inst.P, inst.pi).flat
    d_b_states = inst.d_b.reshape(inst.shape).sum(axis=1)
    d_b_pi = (d_b_states[:, None] * inst.pi).ravel()  # s ~ d_b, a ~ pi
    dP = inst.P_hat - inst.P

    lhs, c1, c2, rpsi, span_bound = [], [], [], [], []
    tv_rows = row_tv(inst.P, inst.P_hat).ravel()
    f_max = psi_max = 0.0
    for g, fv in zip(inst.G, inst.f_members):
        f = fv.q
        f_max = max(f_max, float(np.abs(f).max()))
        v = (inst.pi * f).sum(axis=1)
        err = dP @ v  # (S, A)
        psi = average_reward_and_bias(inst.P, inst.pi, err).q.ravel()
        psi_max = max(psi_max, float(np.abs(psi).max()))
        e = err.ravel()
        lhs.append(abs(fv.eta - d_star @ g.ravel()))
        c1.append(abs(inst.d_b @ e))
        c2.append(abs(d_star @ e - inst.d_b @ e))
        rpsi.append(abs(inst.d_b @ psi - d_b_pi @ psi))
        span_bound.append(float(inst.d_b @ ((v.max() - v.min()) * tv_rows)))
    kl_rows = row_kl(inst.P, inst.P_hat).ravel()
    e_tv = float(inst.d_b @ tv_rows)
    e_sqrt_kl = float(inst.d_b @ np.sqrt(np.maximum(kl_rows, 0.0) / 2.0))

    report.lhs_thm32 = float(max(lhs))
    report.term_circ1 = float(max(c1))
    report.term_circ2 = float(max(c2))
    report.r_psi = float(max(rpsi))
    report.circ2_rpsi_gap = float(np.abs(np.array(c2) - np.array(rpsi)).max())
    report.f_max = f_max
    report.psi_max = psi_max
    report.term_circ1_tv = f_max * e_tv
    report.term_circ1_kl = f_max * e_sqrt_kl
    report.term_circ1_span = float(max(span_bound))
    report.kl_term = e_sqrt_kl
    report.rhs_thm32 = report.term_circ1_kl + report.r_psi
    report.g_max = float(inst.G.g_max)
    h = report.holds
    h["thm32_lhs_le_circ1_plus_circ2"] = report.term_circ1 + report.term_circ2 - report.lhs_thm32 >= SLACK
    h["thm32_circ1_le_tv"] = report.term_circ1_tv - report.term_circ1 >= SLACK
    h["thm32_tv_le_pinsker"] = report.term_circ1_kl - report.term_circ1_tv >= SLACK
    h["thm32_circ2_eq_rpsi"] = report.circ2_rpsi_gap < IDENTITY_TOL
    h["thm32_chain"] = report.rhs_thm32 - report.lhs_thm32 >= SLACK
    return report


def verify_theorem34(true_mdp, model, pi_b, pi, dictionary, report=None, _inst=None):
    """Identity and chain checks, then the combined triangle bound."""
    inst = _inst or _Instance(true_mdp, model, pi_b, pi, dictionary)
    report = report or BoundReport()
    verify_theorem31(None, None, None, None, None, report, inst)
    verify_theorem32(None, None, None, None, None, report, inst)
    d_star = stationary_distribution(inst.P, inst.pi).flat
    report.lhs_thm34 = float(np.abs(inst.G.flat @ (inst.d_b - d_star)).max())
    report.combined_rhs_thm34 = report.lhs_thm31_cov + report.r_psi + report.f_max * report.kl_term
    report.holds["thm34_combined"] = report.combined_rhs_thm34 - report.lhs_thm34 >= SLACK
    return report


def verify_all(true_mdp, model, pi_b, pi, dictionary):
    return verify_theorem34(true_mdp, model, pi_b, pi, dictionary)


# --- seeded random instances -------------------------------------------------

@dataclass
class Instance:
    seed: int
    mdp: object
    model: TabularModel
    pi_b: TabularPolicy
    pi: TabularPolicy
    dictionary: FunctionDictionary


def random_instance(seed, max_states=8, max_actions=3, n_random=64, g_max=1.0, model_noise=None):
    """Dense random MDP, a perturbed model, two random policies, default dictionary."""
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    mdp = random_mdp(rng, S, A)
    noise = rng.dirichlet(np.ones(S), size=(S, A))
    w = rng.uniform(0.05, 0.6) if model_noise is None else model_noise
    model = TabularModel((1 - w) * mdp.transition + w * noise, np.zeros((S, A, S)))
    pi_b = random_policy(rng, S, A)
    pi = random_policy(rng, S, A)
    dictionary = FunctionDictionary.default(rng, S, A, g_max=g_max, n_random=n_random)
    return Instance(seed, mdp, model, pi_b, pi, dictionary)


def verify_instance(seed, **kwargs):
    inst = random_instance(seed, **kwargs)
    report = verify_all(inst.mdp, inst.model, inst.pi_b, inst.pi, inst.dictionary)
    return inst, report


# --- tabular regularized improvement -----------------------------------------

@dataclass
class ImprovementResult:
    policies: list  # TabularPolicy per step, index 0 = initial
    objective: list
    tv_true: list  # TV(d_pi^{P*}, d_{pi_b}^{P*}) per step
    avg_reward_true: list
    avg_reward_model: list

    @property
    def final(self):
        return self.policies[-1]


def tabular_regularized_improvement(true_mdp, dataset, alpha, steps, model=None, lr=0.05,
                                    fd_step=1e-5, g_max=1.0, smoothing=1e-2, init_logits=None,
                                    pi_b=None):
    """Ascend ``alpha * eta_hat(pi) - ipm_supnorm(d_data, d_pi^{P_hat})`` over
    softmax logits with central finite-difference gradients and Adam steps.

    ``eta_hat`` is the exact average reward under the model. Diagnostics are
    computed under the true dynamics against ``pi_b`` (default: the empirical
    behaviour policy of ``dataset``). ``model`` defaults to the smoothed MLE
    fit of ``dataset``; pass ``true_mdp`` itself for the exact-model setting.
    """
    from .nn import AdamState  # local: keeps the tabular tier importable on its own

    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    S, A = true_mdp.n_states, true_mdp.n_actions
    visited = np.zeros(S, dtype=bool)
    visited[dataset.s] = True
    if not visited.all():
        raise CoverageError(f"states never visited: {np.flatnonzero(~visited).tolist()}")
    if model is None:
        model = mle_tabular_model(dataset, smoothing)
    P_hat = _transition(model)
    d_data = empirical_distribution(dataset).flat
    reward = true_mdp.reward.ravel()
    if pi_b is None:
        counts = np.zeros((S, A))
        np.add.at(counts, (dataset.s, dataset.a), 1.0)
        pi_b = counts / counts.sum(axis=1, keepdims=True)
    d_b = stationary_distribution(true_mdp, pi_b).flat

    def objective(theta):
        pi = TabularPolicy.from_logits(theta.reshape(S, A))
        d = stationary_distribution(P_hat, pi).flat
        return alpha * float(d @ reward) - ipm_supnorm(d_data, d, g_max)

    def record(theta, res):
        pi = TabularPolicy.from_logits(theta.reshape(S, A))
        d_true = stationary_distribution(true_mdp, pi).flat
        res.policies.append(pi)
        res.objective.append(objective(theta))
        res.tv_true.append(0.5 * float(np.abs(d_true - d_b).sum()))
        res.avg_reward_true.append(float(d_true @ reward))
        res.avg_reward_model.append(float(stationary_distribution(P_hat, pi).flat @ reward))

    theta = np.zeros(S * A) if init_logits is None else np.asarray(init_logits, float).ravel().copy()
    res = ImprovementResult([], [], [], [], [])
    record(theta, res)
    opt = AdamState.for_params([theta], lr=lr)
    for _ in range(steps):
        grad = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = fd_step
            grad[i] = (objective(theta + e) - objective(theta - e)) / (2 * fd_step)
        # ascent: Adam minimises, so feed the negated gradient
        (theta,) = opt.step([theta], [-grad])
        record(theta, res)
    return res
