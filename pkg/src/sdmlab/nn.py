"""A small numpy neural-network stack: fully connected nets with LeakyReLU,
hand-written backprop, the losses the trainer needs, Adam, and a central
finite-difference gradient checker.

Parameters are plain lists ``[W0, b0, W1, b1, ...]`` of float64 arrays, so the
optimizer, soft updates and checkpoints all work on the same flat structure.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch

LEAKY_SLOPE = 0.01


class Mlp:
    """Feedforward net ``Linear -> act -> ... -> Linear [-> output transform]``.

    ``output`` is ``"linear"`` or ``"tanh"`` (scaled by ``max_output``); sigmoid
    heads are kept as logits and handled by the loss functions.
    """

    def __init__(self, sizes, slope=LEAKY_SLOPE, output="linear", max_output=1.0, params=None, rng=None):
        self.sizes = tuple(int(n) for n in sizes)
        self.slope = float(slope)
        self.output = output
        self.max_output = float(max_output)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                params.append(rng.uniform(-bound, bound, size=fan_out))
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        expected = [(i, o) if k % 2 == 0 else (o,)
                    for i, o in zip(self.sizes[:-1], self.sizes[1:]) for k in (0, 1)]
        if [p.shape for p in self.params] != expected:
            raise ShapeMismatch(f"parameter shapes {[p.shape for p in self.params]} != {expected}")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x, params=None):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        params = self.params if params is None else params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"input shape {x.shape}, expected (batch, {self.sizes[0]})")
        acts = [x]
        pre = []
        h = x
        for layer in range(self.n_layers):
            z = h @ params[2 * layer] + params[2 * layer + 1]
            pre.append(z)
            if layer < self.n_layers - 1:
                h = np.where(z > 0, z, self.slope * z)
                acts.append(h)
            else:
                h = z
        if self.output == "tanh":
            h = self.max_output * np.tanh(h)
        return h, (acts, pre, h)

    def __call__(self, x, params=None):
        return self.forward(x, params)[0]

    def backward(self, cache, grad_out, params=None):
        """Gradients w.r.t. parameters and input, given ``dLoss/dOutput``."""
        params = self.params if params is None else params
        acts, pre, out = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != out.shape:
            raise ShapeMismatch(f"grad_out shape {g.shape} != output shape {out.shape}")
        if self.output == "tanh":
            g = g * (self.max_output - out ** 2 / self.max_output)
        grads = [None] * len(params)
        for layer in reversed(range(self.n_layers)):
            if layer < self.n_layers - 1:
                g = g * np.where(pre[layer] > 0, 1.0, self.slope)
            grads[2 * layer] = acts[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ params[2 * layer].T
        return grads, g

    def copy(self):
        return Mlp(self.sizes, self.slope, self.output, self.max_output,
                   params=[p.copy() for p in self.params])

    def soft_update_from(self, source, tau):
        """``self <- tau * source + (1 - tau) * self``, in place."""
        for t, s in zip(self.params, source.params):
            t *= 1.0 - tau
            t += tau * s

    def to_json(self):
        return {"sizes": list(self.sizes), "slope": self.slope, "output": self.output,
                "max_output": self.max_output, "params": [p.tolist() for p in self.params]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["sizes"], obj["slope"], obj["output"], obj["max_output"],
                   params=[np.asarray(p, dtype=np.float64) for p in obj["params"]])


def mlp_apply(net, x):
    return net(x)


# --- losses: each returns (loss, dloss/dinputs...) --------------------------

def _finite(loss):
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    return float(loss)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def squared_loss(pred, target):
    diff = pred - target
    return _finite(np.mean(diff ** 2)), 2.0 * diff / diff.size


def huber(residual, delta=500.0):
    """Mean Huber loss; the slope magnitude is capped at ``delta``."""
    a = np.abs(residual)
    quad = a <= delta
    loss = np.where(quad, 0.5 * residual ** 2, delta * (a - 0.5 * delta))
    grad = np.where(quad, residual, delta * np.sign(residual)) / residual.size
    return _finite(loss.mean()), grad


def gaussian_nll(mean, log_std, target):
    """Mean over elements of ``0.5 z^2 + log_std + 0.5 log(2 pi)``."""
    inv_var = np.exp(-2.0 * log_std)
    diff = mean - target
    n = diff.size
    loss = 0.5 * diff ** 2 * inv_var + log_std + 0.5 * np.log(2 * np.pi)
    return _finite(loss.mean()), diff * inv_var / n, (1.0 - diff ** 2 * inv_var) / n


def weighted_bce_logits(logits, labels, pos_weight=1.0):
    """Mean BCE on logits with the positive class up-weighted by ``pos_weight``."""
    w = np.where(labels > 0.5, pos_weight, 1.0)
    loss = w * (labels * softplus(-logits) + (1 - labels) * softplus(logits))
    grad = w * (sigmoid(logits) - labels) / logits.size
    return _finite(loss.mean()), grad


def discriminator_bce(logit_true, labels_true, logit_fake):
    """``-(mean_true[y log D + (1-y) log(1-D)] + mean_fake[log(1-D)])``."""
    lt, gt = weighted_bce_logits(logit_true, labels_true)
    lf, gf = weighted_bce_logits(logit_fake, np.zeros_like(logit_fake))
    return _finite(lt + lf), gt, gf


def generator_loss(logit_fake, kind="nonsaturating"):
    """``-mean log D(fake)`` (non-saturating) or ``mean log(1 - D(fake))``."""
    n = logit_fake.size
    if kind == "nonsaturating":
        return _finite(softplus(-logit_fake).mean()), -sigmoid(-logit_fake) / n
    if kind == "minimax":
        return _finite(-softplus(logit_fake).mean()), -sigmoid(logit_fake) / n
    raise ValueError(f"unknown generator loss {kind!r}")


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   lr, beta1, beta2, eps)

    def step(self, params, grads):
        return adam_step(self, params, grads)


def adam_step(state, params, grads):
    """Bias-corrected Adam update, applied to ``params`` in place (also returned)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and Adam moments differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape} / grad {g.shape} / moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- gradient checking -------------------------------------------------------

def numerical_gradient(fn, params, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``params``
    (perturbed in place and restored)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = fn()
            p[idx] = orig - h
            down = fn()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-12):
    """Worst per-tensor ``||a - n|| / max(||a||, ||n||)``.

    Tensor norms rather than entries: single entries that are ~0 analytically
    only carry finite-difference round-off.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


def gradient_check(fn_and_grad, params, h=1e-5):
    """``fn_and_grad() -> (loss, grads)``; returns the max relative error."""
    _, analytic = fn_and_grad()
    numeric = numerical_gradient(lambda: fn_and_grad()[0], params, h)
    return max_relative_error(analytic, numeric)


def params_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
