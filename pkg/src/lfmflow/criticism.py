"""Kernel two-sample tests and predictive scoring."""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import gammaln, logsumexp

from lfmflow.errors import DataError
from lfmflow.models import LikelihoodSpec

log = logging.getLogger(__name__)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def median_bandwidth(A, B) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    Z = np.vstack([_as_matrix(A), _as_matrix(B)])
    med = float(np.median(pdist(Z)))
    return med if med > 0 else 1.0


def _mmd2_from_kernel(K: np.ndarray, n: int) -> float:
    Kxx, Kyy, Kxy = K[:n, :n], K[n:, n:], K[:n, n:]
    m = K.shape[0] - n
    sxx = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
    syy = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * Kxy.mean())


def _pooled_kernel(A, B, gamma):
    Z = np.vstack([A, B])
    return np.exp(-cdist(Z, Z, "sqeuclidean") / (2.0 * gamma ** 2))


def mmd2_unbiased(A, B, gamma: float | None = None) -> float:
    """Unbiased MMD^2 with a Gaussian kernel; rows are samples."""
    A, B = _as_matrix(A), _as_matrix(B)
    if len(A) < 2 or len(B) < 2:
        raise DataError("MMD needs at least 2 samples per set")
    if A.shape[1] != B.shape[1]:
        raise DataError(f"sample widths differ: {A.shape[1]} vs {B.shape[1]}")
    gamma = median_bandwidth(A, B) if gamma is None else gamma
    return _mmd2_from_kernel(_pooled_kernel(A, B, gamma), len(A))


def permutation_threshold(A, B, n_perm: int = 200, alpha: float = 0.05, seed=0,
                          gamma: float | None = None) -> float:
    """(1 - alpha) quantile of MMD^2 under random relabelling of the pooled sample."""
    A, B = _as_matrix(A), _as_matrix(B)
    if len(A) < 2 or len(B) < 2:
        raise DataError("MMD needs at least 2 samples per set")
    gamma = median_bandwidth(A, B) if gamma is None else gamma
    K = _pooled_kernel(A, B, gamma)
    rng = np.random.default_rng(seed)
    n = len(A)
    stats = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(len(K))
        stats[i] = _mmd2_from_kernel(K[np.ix_(p, p)], n)
    return float(np.quantile(stats, 1.0 - alpha))


def two_sample_test(A, B, n_perm: int = 200, alpha: float = 0.05, seed=0) -> dict:
    gamma = median_bandwidth(A, B)
    stat = mmd2_unbiased(A, B, gamma)
    thr = permutation_threshold(A, B, n_perm, alpha, seed, gamma)
    return {"mmd2": stat, "threshold": thr, "reject": bool(stat > thr), "bandwidth": gamma}


def nlpd(predictive, y, likelihood: LikelihoodSpec, mask=None, noise_var: float | None = None) -> float:
    """Mean negative log of the Monte Carlo mixture predictive density.

    ``predictive`` holds emitted values ``h(f)`` at the test points with
    shape ``[S, N, p]`` (or ``[S, N]``); ``y`` is ``[N, p]``.
    """
    h = np.asarray(predictive, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if h.ndim == 2:
        h = h[..., None]
    y = y.reshape(h.shape[1:])
    mask = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64).reshape(y.shape)
    if likelihood.kind == "gaussian":
        nv = likelihood.noise_var if noise_var is None else noise_var
        ll = -0.5 * (y - h) ** 2 / nv - 0.5 * np.log(2 * np.pi * nv)
    else:
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise DataError("Poisson observations must be non-negative integers")
        ll = y * h - np.exp(h) - gammaln(y + 1.0)
    with np.errstate(invalid="ignore"):
        per_point = (ll * mask).sum(axis=-1)  # [S, N]
    lp = logsumexp(per_point, axis=0) - np.log(h.shape[0])
    n_test = int((mask.sum(axis=-1) > 0).sum())
    if not np.all(np.isfinite(lp)):
        log.warning("zero predictive mass at %d test point(s)", int((~np.isfinite(lp)).sum()))
        return float("inf")
    return float(-lp.sum() / max(n_test, 1))
