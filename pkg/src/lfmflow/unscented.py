"""Sigma points, unscented transforms and Euler-discretised transition moments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lfmflow import autodiff as ad
from lfmflow.errors import ConfigError, NumericalError
from lfmflow.models import ModelSpec, joint_dynamics

LOG_2PI = np.log(2.0 * np.pi)
COV_FLOOR = 1e-8


@dataclass(frozen=True)
class UTParams:
    alpha: float = 1.0
    beta: float = 0.0
    kappa: float | None = None  # None means kappa = d
    eta_convention: str = "minus_kappa"  # eta = a^2(d+k) - k; "minus_dim": - d
    wc0: str = "ratio"  # eta / (d + eta + 1 - a^2 + b); "standard": wm0 + 1 - a^2 + b

    def __post_init__(self):
        if self.eta_convention not in ("minus_kappa", "minus_dim"):
            raise ConfigError(f"unknown eta convention {self.eta_convention!r}")
        if self.wc0 not in ("ratio", "standard"):
            raise ConfigError(f"unknown wc0 convention {self.wc0!r}")

    def eta(self, d: int) -> float:
        kappa = float(d) if self.kappa is None else float(self.kappa)
        base = self.alpha ** 2 * (d + kappa)
        return base - (kappa if self.eta_convention == "minus_kappa" else d)


@dataclass
class SigmaPointSet:
    chi: np.ndarray  # [d, 2d+1]
    w_m: np.ndarray
    w_c: np.ndarray
    W: np.ndarray


def ut_weights(d: int, params: UTParams = UTParams()):
    """Mean weights, covariance weights and the matrix ``W``."""
    if d < 1:
        raise ConfigError("dimension must be >= 1")
    eta = params.eta(d)
    if d + eta <= 0:
        raise ConfigError(f"d + eta = {d + eta} must be positive")
    n = 2 * d + 1
    w_m = np.full(n, 1.0 / (2 * d + 2 * eta))
    w_c = w_m.copy()
    w_m[0] = eta / (d + eta)
    a2, b = params.alpha ** 2, params.beta
    if params.wc0 == "ratio":
        w_c[0] = eta / (d + eta + 1.0 - a2 + b)
    else:
        w_c[0] = w_m[0] + 1.0 - a2 + b
    omega = np.eye(n) - np.outer(w_m, np.ones(n))
    W = omega @ np.diag(w_c) @ omega.T
    return w_m, w_c, W


def _matrix_root(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise NumericalError(f"covariance is indefinite (min eigenvalue {w.min():.3g})")
    return V * np.sqrt(np.clip(w, 0.0, None))


def sigma_points(mean, cov, params: UTParams = UTParams(), root: np.ndarray | None = None) -> SigmaPointSet:
    """Symmetric sigma-point set; ``root`` may supply ``S`` with ``S S^T = cov``."""
    mean = np.asarray(mean, dtype=np.float64).ravel()
    d = mean.size
    w_m, w_c, W = ut_weights(d, params)
    S = _matrix_root(np.atleast_2d(np.asarray(cov, dtype=np.float64))) if root is None else root
    S = np.sqrt(d + params.eta(d)) * np.asarray(S, dtype=np.float64)
    if S.shape[1] < d:
        S = np.hstack([S, np.zeros((d, d - S.shape[1]))])
    chi = mean[:, None] + np.hstack([np.zeros((d, 1)), S, -S])
    return SigmaPointSet(chi, w_m, w_c, W)


def unscented_transform(g, mean, cov, params: UTParams = UTParams()):
    """Propagate N(mean, cov) through ``g`` (d-vector -> p-vector)."""
    sp = sigma_points(mean, cov, params)
    gam = np.stack([np.atleast_1d(np.asarray(g(c), dtype=np.float64)) for c in sp.chi.T])
    if not np.all(np.isfinite(gam)):
        raise NumericalError("transform produced non-finite values")
    mu = sp.w_m @ gam
    dev = gam - mu
    return mu, (dev.T * sp.w_c) @ dev


def _trail(x, k: int):
    """Append ``k`` singleton axes to a non-scalar value."""
    if np.ndim(ad.value(x)) == 0:
        return x
    for _ in range(k):
        x = ad.expand_dims(x, -1)
    return x


def euler_moment_step(model: ModelSpec, f_k, theta: dict, t_k, dt, params: UTParams = UTParams(),
                      diffusion_scaling: str = "additive", floor: float = COV_FLOOR):
    """Gaussian transition moments ``(m_{k+1}, P_{k+1})`` for a batch of states.

    ``f_k`` is ``[..., d]``; ``theta`` entries, ``t_k`` and ``dt`` broadcast
    against ``f_k[..., 0]``. ``diffusion_scaling="additive"`` uses
    ``P = Sigma + dt U`` with sigma points from N(f_k, Sigma); ``"dt"`` uses
    ``P = dt U`` with sigma points from N(f_k, dt Sigma).
    """
    if diffusion_scaling not in ("additive", "dt"):
        raise ConfigError(f"unknown diffusion scaling {diffusion_scaling!r}")
    d = model.d
    w_m, _, W = ut_weights(d, params)
    eta = params.eta(d)
    sigma = model.diffusion(theta)

    spread = 0.0
    for j, r in enumerate(model.top_rows):
        E = np.zeros((d, d))
        E[r, r] = 1.0
        var = model.gp_spectral_density(theta, j) * (d + eta)
        if diffusion_scaling == "dt":
            var = var * dt
        spread = spread + _trail(ad.sqrt(var), 2) * E
    batch = np.broadcast_shapes(np.shape(ad.value(f_k))[:-1], np.shape(ad.value(spread))[:-2])
    spread = ad.broadcast_to(spread, batch + (d, d))
    offsets = ad.concatenate([np.zeros(batch + (d, 1)), spread, -spread], axis=-1)
    chi = ad.expand_dims(f_k, -1) + offsets  # [..., d, 2d+1]
    pts = ad.swapaxes(chi, -1, -2)  # [..., 2d+1, d]
    theta_e = {k: _trail(v, 1) for k, v in theta.items()}
    Dp = joint_dynamics(model, pts, _trail(t_k, 1), theta_e, check=False)
    DT = ad.swapaxes(Dp, -1, -2)

    m = f_k + _trail(dt, 1) * ad.matmul(DT, w_m)
    U = ad.matmul(ad.matmul(chi, W), Dp) + ad.matmul(ad.matmul(DT, W), pts) + sigma
    dt2 = _trail(dt, 2)
    P = sigma + dt2 * U if diffusion_scaling == "additive" else dt2 * U
    P = 0.5 * (P + ad.swapaxes(P, -1, -2))
    return m, ad.psd_floor(P, floor)


def transition_log_density(f_next, m, P):
    """Multivariate normal log density, batched over leading axes."""
    L = ad.cholesky(P)
    r = ad.expand_dims(ad.subtract(f_next, m), -1)
    z = ad.solve_triangular(L, r)
    d = ad.value(P).shape[-1]
    idx = np.arange(d)
    logdet = ad.sum_(ad.log(ad.getitem(L, (Ellipsis, idx, idx))), axis=-1)
    return -0.5 * ad.sum_(ad.square(z), axis=(-2, -1)) - logdet - 0.5 * d * LOG_2PI
