"""State-space Matérn GPs and exact linear-Gaussian inference.

These routines are the ground truth the variational method is checked
against: Kalman filtering, RTS smoothing, forward-filter backward-sampling
and closed-form GP regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from lfmflow.autodiff import cholesky_values
from lfmflow.errors import ConfigError, DataError, NumericalError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MaternSSM:
    n: int
    lam: float
    v: float
    D: np.ndarray
    L: np.ndarray
    q: float
    P_inf: np.ndarray


@dataclass
class LinearSSM:
    """Time-varying linear-Gaussian state-space model.

    ``A[k]``, ``Q[k]`` (and optional offsets ``b[k]``) map step k to k+1.
    ``H`` selects the observed coordinates; ``R`` is the observation noise
    variance (scalar, shared by all observed coordinates).
    """

    A: np.ndarray  # [T-1, d, d]
    Q: np.ndarray  # [T-1, d, d]
    H: np.ndarray  # [p, d]
    R: float
    m0: np.ndarray
    P0: np.ndarray
    b: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.m0.shape[0]

    def offset(self, k: int) -> np.ndarray:
        return np.zeros(self.d) if self.b is None else self.b[k]


@dataclass
class FilterResult:
    m_pred: np.ndarray
    P_pred: np.ndarray
    m_filt: np.ndarray
    P_filt: np.ndarray
    log_evidence: float


@dataclass
class SmootherResult:
    m: np.ndarray
    P: np.ndarray
    gains: np.ndarray = field(repr=False)


# ----------------------------------------------------------------------------
# Matérn construction


def spectral_density(n: int, lam: float, v: float, inflated_constant: bool = False) -> float:
    """White-noise spectral density giving stationary variance ``v``.

    ``inflated_constant`` swaps ((n-1)!)^2 for the (n!)^2 variant, which inflates
    the stationary variance by n^2; it is kept only for comparison.
    """
    fact = factorial(n) if inflated_constant else factorial(n - 1)
    return v * (2.0 * lam) ** (2 * n - 1) * fact ** 2 / factorial(2 * n - 2)


def companion_matrix(n: int, lam: float) -> np.ndarray:
    D = np.zeros((n, n))
    D[np.arange(n - 1), np.arange(1, n)] = 1.0
    D[n - 1] = [-comb(n, i) * lam ** (n - i) for i in range(n)]
    return D


def matern_build(n: int, lam: float, v: float, inflated_constant: bool = False) -> MaternSSM:
    """Companion-form SDE ``(lam + d/dt)^n x = w`` for a Matérn-(n-1/2) GP."""
    if n < 1:
        raise ConfigError("Matérn SSM order must be >= 1")
    if lam <= 0 or v <= 0:
        raise ConfigError("lambda and v must be positive")
    D = companion_matrix(n, lam)
    L = np.zeros((n, 1))
    L[-1, 0] = 1.0
    q = spectral_density(n, lam, v, inflated_constant)
    P_inf = solve_continuous_lyapunov(D, -q * (L @ L.T))
    P_inf = 0.5 * (P_inf + P_inf.T)
    if not inflated_constant and abs(P_inf[0, 0] - v) > 1e-8 * max(1.0, v):
        raise NumericalError(f"stationary variance {P_inf[0, 0]} != v={v}")
    return MaternSSM(n, float(lam), float(v), D, L, q, P_inf)


def lengthscale_to_lambda(ell: float, n: int, convention: str = "reduced") -> float:
    """Rate ``lambda`` for length-scale ``ell``.

    ``reduced`` uses sqrt(2n - 2) / ell, ``standard`` uses sqrt(2n - 1) / ell.
    """
    if not ell > 0:
        raise ConfigError("length-scale must be positive")
    if convention == "reduced":
        c = np.sqrt(2 * n - 2)
    elif convention == "standard":
        c = np.sqrt(2 * n - 1)
    else:
        raise ConfigError(f"unknown length-scale convention {convention!r}")
    if c == 0:
        raise ConfigError(f"the {convention!r} convention is undefined for order {n}")
    return float(c / ell)


def matern_kernel(tau, lam: float, v: float, n: int):
    """Half-integer Matérn covariance for SSM order n in {1, 2, 3}."""
    a = lam * np.abs(np.asarray(tau, dtype=np.float64))
    if n == 1:
        poly = 1.0
    elif n == 2:
        poly = 1.0 + a
    elif n == 3:
        poly = 1.0 + a + a * a / 3.0
    else:
        raise ConfigError(f"Matérn kernel of order {n} is not supported")
    return v * poly * np.exp(-a)


# ----------------------------------------------------------------------------
# discretisation

def exact_discretize(ssm: MaternSSM, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One-step transition ``(A, Q)`` with ``Q = P_inf - A P_inf A^T``."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    A = expm(dt * ssm.D)
    Q = ssm.P_inf - A @ ssm.P_inf @ A.T
    return A, 0.5 * (Q + Q.T)


def van_loan(F: np.ndarray, Qc: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretisation of ``df = F f dt + noise`` with diffusion ``Qc``."""
    d = F.shape[0]
    M = np.zeros((2 * d, 2 * d))
    M[:d, :d] = -F
    M[:d, d:] = Qc
    M[d:, d:] = F.T
    E = expm(M * dt)
    A = E[d:, d:].T
    Q = A @ E[:d, d:]
    return A, 0.5 * (Q + Q.T)


def matern_linear_ssm(ssm: MaternSSM, times: np.ndarray, noise_var: float) -> LinearSSM:
    """Exactly discretised Matérn SSM on ``times`` with a stationary prior."""
    times = np.asarray(times, dtype=np.float64)
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise DataError("mesh must be strictly increasing")
    As, Qs = zip(*(exact_discretize(ssm, dt) for dt in dts)) if len(dts) else ((), ())
    n = ssm.n
    H = np.zeros((1, n))
    H[0, 0] = 1.0
    return LinearSSM(np.array(As).reshape(-1, n, n), np.array(Qs).reshape(-1, n, n), H,
                     float(noise_var), np.zeros(n), ssm.P_inf.copy())


# ----------------------------------------------------------------------------
# exact inference


def _check_obs(ssm: LinearSSM, y, mask):
    T = ssm.A.shape[0] + 1
    p = ssm.H.shape[0]
    y = np.asarray(y, dtype=np.float64).reshape(T, p)
    mask = np.asarray(mask, dtype=bool).reshape(T, p)
    return T, y, mask


def kalman_filter(ssm: LinearSSM, y, mask) -> FilterResult:
    """Kalman filter with masked observations and log evidence.

    ``y`` and ``mask`` have shape ``[T, p]``; rows without observed entries
    skip the update step.
    """
    T, y, mask = _check_obs(ssm, y, mask)
    d = ssm.d
    m_pred = np.zeros((T, d))
    P_pred = np.zeros((T, d, d))
    m_filt = np.zeros((T, d))
    P_filt = np.zeros((T, d, d))
    m, P = ssm.m0.astype(np.float64).copy(), ssm.P0.astype(np.float64).copy()
    logev = 0.0
    for k in range(T):
        if k > 0:
            A = ssm.A[k - 1]
            m = A @ m + ssm.offset(k - 1)
            P = A @ P @ A.T + ssm.Q[k - 1]
            P = 0.5 * (P + P.T)
        m_pred[k], P_pred[k] = m, P
        obs = mask[k]
        if obs.any():
            H = ssm.H[obs]
            S = H @ P @ H.T + ssm.R * np.eye(H.shape[0])
            try:
                Ls = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"innovation covariance not PD at step {k}") from exc
            r = y[k, obs] - H @ m
            a = np.linalg.solve(Ls, r)
            logev += -0.5 * a @ a - np.log(np.diag(Ls)).sum() - 0.5 * len(r) * LOG_2PI
            K = np.linalg.solve(Ls.T, np.linalg.solve(Ls, H @ P)).T
            m = m + K @ r
            P = P - K @ S @ K.T
            P = 0.5 * (P + P.T)
        m_filt[k], P_filt[k] = m, P
    return FilterResult(m_pred, P_pred, m_filt, P_filt, float(logev))


def _gain(P_f, A, P_pred):
    # G = P_f A^T P_pred^{-1}; pseudo-inverse tolerates deterministic steps
    return np.linalg.lstsq(P_pred.T, (P_f @ A.T).T, rcond=1e-12)[0].T


def rts_smooth(filtered: FilterResult, ssm: LinearSSM) -> SmootherResult:
    """Rauch-Tung-Striebel backward pass."""
    T, d = filtered.m_filt.shape
    m = filtered.m_filt.copy()
    P = filtered.P_filt.copy()
    G = np.zeros((max(T - 1, 0), d, d))
    for k in range(T - 2, -1, -1):
        A = ssm.A[k]
        Pp = filtered.P_pred[k + 1]
        if not np.all(np.isfinite(Pp)):
            raise NumericalError(f"non-finite predicted covariance at step {k + 1}")
        G[k] = _gain(filtered.P_filt[k], A, Pp)
        m[k] = filtered.m_filt[k] + G[k] @ (m[k + 1] - filtered.m_pred[k + 1])
        Pk = filtered.P_filt[k] + G[k] @ (P[k + 1] - Pp) @ G[k].T
        P[k] = 0.5 * (Pk + Pk.T)
    return SmootherResult(m, P, G)


def _psd_sqrt(C):
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def ffbs_sample(filtered: FilterResult, ssm: LinearSSM, n_samples: int, seed) -> np.ndarray:
    """Joint posterior path draws, shape ``[n_samples, T, d]``."""
    rng = np.random.default_rng(seed)
    T, d = filtered.m_filt.shape
    out = np.zeros((n_samples, T, d))
    S = _psd_sqrt(filtered.P_filt[-1])
    out[:, -1] = filtered.m_filt[-1] + rng.standard_normal((n_samples, d)) @ S.T
    for k in range(T - 2, -1, -1):
        A = ssm.A[k]
        Pf = filtered.P_filt[k]
        Pp = filtered.P_pred[k + 1]
        G = _gain(Pf, A, Pp)
        C = Pf - G @ Pp @ G.T
        S = _psd_sqrt(C)
        mean = filtered.m_filt[k] + (out[:, k + 1] - filtered.m_pred[k + 1]) @ G.T
        out[:, k] = mean + rng.standard_normal((n_samples, d)) @ S.T
    return out


@dataclass
class GPPosterior:
    mean: np.ndarray
    cov: np.ndarray
    log_marginal: float

    def sample(self, n_samples: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        L = cholesky_values(0.5 * (self.cov + self.cov.T))
        return self.mean + rng.standard_normal((n_samples, len(self.mean))) @ L.T


def gp_posterior(n: int, lam: float, v: float, t_obs, y, noise_var: float, t_query) -> GPPosterior:
    """Closed-form Matérn GP regression at ``t_query``."""
    t_obs = np.asarray(t_obs, dtype=np.float64)
    t_query = np.asarray(t_query, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Kqq = matern_kernel(t_query[:, None] - t_query[None, :], lam, v, n)
    if len(t_obs) == 0:
        return GPPosterior(np.zeros(len(t_query)), Kqq, 0.0)
    K = matern_kernel(t_obs[:, None] - t_obs[None, :], lam, v, n) + noise_var * np.eye(len(t_obs))
    Kq = matern_kernel(t_query[:, None] - t_obs[None, :], lam, v, n)
    Lk = cholesky_values(K)
    alpha = np.linalg.solve(Lk.T, np.linalg.solve(Lk, y))
    V = np.linalg.solve(Lk, Kq.T)
    mean = Kq @ alpha
    cov = Kqq - V.T @ V
    logml = (-0.5 * y @ alpha - np.log(np.diag(Lk)).sum() - 0.5 * len(y) * LOG_2PI)
    return GPPosterior(mean, 0.5 * (cov + cov.T), float(logml))
