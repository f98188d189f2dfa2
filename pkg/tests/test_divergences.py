import math

import numpy as np
import pytest

from sdmlab.divergences import (FunctionDictionary, divergence, ipm_dictionary, ipm_supnorm, jsd, kl, row_kl,
                                row_tv, tv)
from sdmlab.errors import DimensionMismatch, EmptyDictionary, NegativeBound, SupportViolation


def test_identical_zero():
    p = np.array([0.2, 0.3, 0.5])
    for kind in ("TV", "KL", "JSD"):
        assert divergence(p, p, kind) == 0.0


def test_kl_example():
    # 0.5 ln 2 + 0.5 ln(2/3)
    value = kl([0.5, 0.5], [0.25, 0.75])
    assert abs(value - (0.5 * math.log(2) + 0.5 * math.log(2 / 3))) < 1e-15
    assert abs(value - 0.143841036) < 1e-9


def test_kl_support():
    with pytest.raises(SupportViolation):
        kl([0.5, 0.5], [1.0, 0.0])
    assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        tv([0.5, 0.5], [1.0, 0.0, 0.0])


def test_pinsker_1000_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(2, 12)
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        assert tv(p, q) <= math.sqrt(kl(p, q) / 2) + 1e-12


def test_jsd_bounded():
    assert abs(jsd([1, 0], [0, 1]) - math.log(2)) < 1e-12


def test_row_versions():
    P = np.array([[0.5, 0.5], [0.9, 0.1]])
    Q = np.array([[0.25, 0.75], [0.9, 0.1]])
    np.testing.assert_allclose(row_tv(P, Q), [0.25, 0.0])
    np.testing.assert_allclose(row_kl(P, Q), [kl(P[0], Q[0]), 0.0], atol=1e-15)


def test_ipm_equal():
    d = FunctionDictionary.default(np.random.default_rng(0), 2, 2)
    p = np.full(4, 0.25)
    assert ipm_dictionary(p, p, d) == (0.0, 0)


def test_ipm_sign_patterns_two_elements():
    d = FunctionDictionary.sign_patterns(2, 1, g_max=1.5)
    p, q = np.array([0.7, 0.3]), np.array([0.2, 0.8])
    val, _ = ipm_dictionary(p, q, d)
    assert abs(val - 1.5 * np.abs(p - q).sum()) < 1e-15


def test_ipm_singleton():
    g = np.array([[1.0], [-0.5]])
    d = FunctionDictionary(g[None], 1.0)
    p, q = np.array([0.7, 0.3]), np.array([0.2, 0.8])
    assert ipm_dictionary(p, q, d)[0] == pytest.approx(abs(p @ g.ravel() - q @ g.ravel()))


def test_ipm_empty():
    with pytest.raises(EmptyDictionary):
        ipm_dictionary([0.5, 0.5], [0.5, 0.5], FunctionDictionary(np.zeros((0, 2, 1)), 1.0))


def test_supnorm_cases():
    assert ipm_supnorm([1, 0], [0, 1], 1.0) == 2.0
    assert ipm_supnorm([1, 0], [0, 1], 0.0) == 0.0
    with pytest.raises(NegativeBound):
        ipm_supnorm([1, 0], [0, 1], -1.0)


def test_supnorm_matches_exhaustive_patterns():
    rng = np.random.default_rng(11)
    for S, A in ((2, 2), (3, 2), (4, 3), (6, 2)):
        p, q = rng.dirichlet(np.ones(S * A)), rng.dirichlet(np.ones(S * A))
        d = FunctionDictionary.sign_patterns(S, A, g_max=3.0)
        assert abs(ipm_supnorm(p, q, 3.0) - ipm_dictionary(p, q, d)[0]) < 1e-12


def test_dictionary_bound_enforced():
    with pytest.raises(NegativeBound):
        FunctionDictionary(np.full((1, 2, 1), 2.0), 1.0)
