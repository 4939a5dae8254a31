import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfmflow import criticism
from lfmflow.errors import DataError
from lfmflow.models import LikelihoodSpec


def naive_mmd2(A, B, gamma):
    k = lambda x, y: np.exp(-np.sum((x - y) ** 2) / (2 * gamma ** 2))  # noqa: E731
    n, m = len(A), len(B)
    sxx = sum(k(A[i], A[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    syy = sum(k(B[i], B[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sxy = sum(k(A[i], B[j]) for i in range(n) for j in range(m)) / (n * m)
    return sxx + syy - 2 * sxy


def test_mmd_matches_pairwise_definition():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(7, 3)), rng.normal(0.5, 1.0, size=(9, 3))
    for gamma in (0.5, 1.7):
        assert criticism.mmd2_unbiased(A, B, gamma) == pytest.approx(naive_mmd2(A, B, gamma), abs=1e-12)


def test_median_bandwidth_example():
    assert criticism.median_bandwidth([[0.0]], [[1.0], [3.0]]) == pytest.approx(2.0)
    assert criticism.median_bandwidth([[1.0], [1.0]], [[1.0]]) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12), m=st.integers(2, 12))
def test_mmd_is_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
    assert criticism.mmd2_unbiased(A, B) == pytest.approx(criticism.mmd2_unbiased(B, A), abs=1e-12)


def test_samples_flattened_over_trailing_axes():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(5, 4, 2)), rng.normal(size=(6, 4, 2))
    assert criticism.mmd2_unbiased(A, B) == criticism.mmd2_unbiased(A.reshape(5, 8), B.reshape(6, 8))


def test_input_validation():
    with pytest.raises(DataError):
        criticism.mmd2_unbiased(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(DataError):
        criticism.mmd2_unbiased(np.zeros((3, 2)), np.zeros((3, 3)))


def test_shift_is_detected():
    rng = np.random.default_rng(2)
    res = criticism.two_sample_test(rng.normal(size=(100, 2)), rng.normal(1.0, 1.0, size=(100, 2)))
    assert res["reject"] and res["mmd2"] > res["threshold"]


def test_same_distribution_rarely_rejected():
    rng = np.random.default_rng(3)
    rejects = [criticism.two_sample_test(rng.normal(size=(30, 2)), rng.normal(size=(30, 2)),
                                         n_perm=100, seed=i)["reject"] for i in range(40)]
    assert np.mean(rejects) <= 0.2


def test_threshold_deterministic_given_seed():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    assert criticism.permutation_threshold(A, B, seed=9) == criticism.permutation_threshold(A, B, seed=9)


def test_nlpd_gaussian_single_sample():
    spec = LikelihoodSpec("gaussian", 1.0)
    assert criticism.nlpd(np.zeros((1, 1, 1)), np.zeros((1, 1)), spec) == pytest.approx(0.918939, abs=1e-6)


def test_nlpd_poisson_and_mixture():
    spec = LikelihoodSpec("poisson")
    assert criticism.nlpd(np.zeros((1, 1)), np.zeros(1), spec) == pytest.approx(1.0)
    h = np.array([[0.0], [np.log(2.0)]])
    y = np.array([1.0])
    expected = -np.log(0.5 * (np.exp(-1.0) + 2 * np.exp(-2.0)))
    assert criticism.nlpd(h, y, spec) == pytest.approx(expected)
    with pytest.raises(DataError):
        criticism.nlpd(h, np.array([0.5]), spec)


def test_nlpd_ignores_masked_points():
    spec = LikelihoodSpec("gaussian", 1.0)
    h = np.zeros((3, 2, 1))
    y = np.array([[0.0], [50.0]])
    assert criticism.nlpd(h, y, spec, mask=np.array([[1.0], [0.0]])) == pytest.approx(0.918939, abs=1e-6)


def test_nlpd_zero_mass_is_infinite(caplog):
    # a zero Poisson rate cannot produce a positive count
    spec = LikelihoodSpec("poisson")
    with caplog.at_level(logging.WARNING, logger="lfmflow.criticism"):
        val = criticism.nlpd(np.full((2, 1, 1), -np.inf), np.array([[3.0]]), spec)
    assert val == np.inf
    assert "zero predictive mass" in caplog.text
