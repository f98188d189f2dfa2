"""Offline datasets: tabular rollouts, empirical distributions, the circle toy
dataset and the JSON Lines file format.

File layout: the first line is ``{"meta": {...}}``; every following line is one
transition ``{"s": .., "a": .., "r": .., "s2": .., "d": 0|1}``. Tabular files
store integer indices, continuous files store lists of floats. A ``.gz``
suffix selects gzip compression.
"""
from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import EmptyDataset, InvalidSplit, KindMismatch, ParseError
from .mdp import StateActionDist, chain_matrix, check_ergodic


class Transition(NamedTuple):
    s: object
    a: object
    r: float
    s_next: object
    done: bool


@dataclass
class Dataset:
    kind: str  # "tabular" | "continuous"
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    d: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.r)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        if self.kind == "tabular":
            return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]),
                              int(self.s2[i]), bool(self.d[i]))
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s2[i], bool(self.d[i]))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kind == other.kind and self.meta == other.meta
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("s", "a", "r", "s2", "d")))

    @property
    def state_dim(self):
        return 1 if self.s.ndim == 1 else self.s.shape[1]

    @property
    def action_dim(self):
        return 1 if self.a.ndim == 1 else self.a.shape[1]

    @classmethod
    def continuous(cls, s, a, r, s2, d, meta=None):
        meta = dict(meta or {})
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        meta.setdefault("kind", "continuous")
        meta.setdefault("state_dim", int(s.shape[1]))
        meta.setdefault("action_dim", int(a.shape[1]))
        return cls("continuous", s, a, np.asarray(r, dtype=np.float64),
                   np.asarray(s2, dtype=np.float64), np.asarray(d, dtype=bool), meta)


# --- tabular generation ------------------------------------------------------

def generate_dataset(mdp, policy, n_steps, seed, behavior="tabular policy"):
    """One continuous rollout of ``policy`` on ``mdp`` from ``mu0``."""
    if n_steps < 1:
        raise EmptyDataset("n_steps must be >= 1")
    pi = getattr(policy, "probs", policy)
    check_ergodic(chain_matrix(mdp, pi))
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.transition, axis=2)
    u = rng.random((n_steps + 1, 2))
    s_arr = np.empty(n_steps, dtype=np.int64)
    a_arr = np.empty(n_steps, dtype=np.int64)
    s2_arr = np.empty(n_steps, dtype=np.int64)
    s = min(int(np.searchsorted(np.cumsum(mdp.initial_dist), u[0, 0], side="right")), S - 1)
    for t in range(n_steps):
        a = min(int(np.searchsorted(cum_pi[s], u[t + 1, 0], side="right")), A - 1)
        s2 = min(int(np.searchsorted(cum_P[s, a], u[t + 1, 1], side="right")), S - 1)
        s_arr[t], a_arr[t], s2_arr[t] = s, a, s2
        s = s2
    r = mdp.reward[s_arr, a_arr].astype(np.float64)
    meta = {"kind": "tabular", "n_states": S, "n_actions": A, "seed": seed,
            "n_steps": n_steps, "behavior": behavior}
    return Dataset("tabular", s_arr, a_arr, r, s2_arr, np.zeros(n_steps, dtype=bool), meta)


def empirical_distribution(dataset):
    if dataset.kind != "tabular":
        raise KindMismatch(f"empirical distribution needs a tabular dataset, got {dataset.kind}")
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    S, A = dataset.meta["n_states"], dataset.meta["n_actions"]
    counts = np.zeros((S, A))
    np.add.at(counts, (dataset.s, dataset.a), 1.0)
    return StateActionDist(counts / counts.sum())


# --- circle toy dataset ------------------------------------------------------

@dataclass
class CircleDataset:
    train: np.ndarray  # (n, 2) columns x, y
    test: np.ndarray
    radius: float
    sigma: float
    meta: dict = field(default_factory=dict)


def make_circle_dataset(n_total=100_000, radius=4.0, sigma=0.05, split=5000, seed=0):
    """Noisy ring ``(rho cos t, rho sin t)``, ``t ~ U(0, 2pi)``, ``rho ~ N(radius, sigma^2)``.

    Train and test are the first two ``split``-sized blocks of a seeded shuffle.
    """
    if split < 1 or n_total < 2 * split:
        raise InvalidSplit(f"need n_total >= 2*split, got n_total={n_total}, split={split}")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_total)
    rho = radius + rng.normal(0.0, 1.0, size=n_total) * sigma
    pts = np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=1)
    order = rng.permutation(n_total)
    meta = {"n_total": n_total, "radius": radius, "sigma": sigma, "split": split, "seed": seed,
            "split_rule": "seeded permutation; train = first split, test = next split"}
    return CircleDataset(pts[order[:split]], pts[order[split:2 * split]], radius, sigma, meta)


# --- JSON Lines io -----------------------------------------------------------

def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _encode(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_dataset(dataset, path):
    with _open(path, "w") as fh:
        fh.write(json.dumps({"meta": dataset.meta}) + "\n")
        for t in dataset:
            fh.write(json.dumps({"s": _encode(t.s), "a": _encode(t.a), "r": t.r,
                                 "s2": _encode(t.s_next), "d": int(t.done)}) + "\n")


def _finite(x):
    if isinstance(x, list):
        return all(_finite(v) for v in x)
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check_record(rec, kind, lineno):
    if not isinstance(rec, dict) or set(rec) != {"s", "a", "r", "s2", "d"}:
        raise ParseError(f"expected keys s, a, r, s2, d; got {sorted(rec) if isinstance(rec, dict) else rec!r}", lineno)
    if rec["d"] not in (0, 1) or isinstance(rec["d"], bool):
        raise ParseError(f"d must be 0 or 1, got {rec['d']!r}", lineno)
    for key in ("s", "a", "r", "s2"):
        v = rec[key]
        if kind == "tabular" and key != "r":
            if not isinstance(v, int) or isinstance(v, bool):
                raise ParseError(f"{key} must be an integer index, got {v!r}", lineno)
        elif kind == "continuous" and key != "r":
            if not isinstance(v, list) or not _finite(v):
                raise ParseError(f"{key} must be a finite vector, got {v!r}", lineno)
        elif not _finite(v):
            raise ParseError(f"{key} must be finite, got {v!r}", lineno)


def iter_records(path):
    """Stream ``(meta, iterator of records)``; memory does not grow with file size."""
    fh = _open(path, "r")
    first = fh.readline()
    try:
        head = json.loads(first)
    except json.JSONDecodeError as exc:
        fh.close()
        raise ParseError(f"bad header: {exc.msg}", 1) from None
    if not isinstance(head, dict) or set(head) != {"meta"}:
        fh.close()
        raise ParseError('first line must be {"meta": ...}', 1)
    meta = head["meta"]
    kind = meta.get("kind", "tabular")
    if kind not in ("tabular", "continuous"):
        fh.close()
        raise ParseError(f"unknown dataset kind {kind!r}", 1)

    def records():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    # NaN / Infinity literals are rejected below.
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(exc.msg, lineno) from None
                _check_record(rec, kind, lineno)
                yield rec

    return meta, records()


def read_dataset(path):
    meta, records = iter_records(path)
    cols = {k: [] for k in ("s", "a", "r", "s2", "d")}
    for rec in records:
        for k in cols:
            cols[k].append(rec[k])
    kind = meta.get("kind", "tabular")
    if kind == "tabular":
        arr = {k: np.asarray(cols[k], dtype=np.int64) for k in ("s", "a", "s2")}
    else:
        arr = {k: np.asarray(cols[k], dtype=np.float64) for k in ("s", "a", "s2")}
        for k in ("s", "a", "s2"):
            if arr[k].ndim == 1:
                arr[k] = arr[k].reshape(0, meta.get("state_dim" if k != "a" else "action_dim", 0))
    return Dataset(kind, arr["s"], arr["a"], np.asarray(cols["r"], dtype=np.float64),
                   arr["s2"], np.asarray(cols["d"], dtype=bool), meta)
