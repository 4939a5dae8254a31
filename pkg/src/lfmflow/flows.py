"""Multivariate-masked local inverse autoregressive flows.

The joint state ``f`` (``T`` mesh points by ``d`` dimensions) is flattened
time-major, so flattened element ``i`` is mesh step ``i // d`` and dimension
``i % d``. Layer ``l`` updates only the elements of dimension ``l mod d``;
every other element passes through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lfmflow import autodiff as ad
from lfmflow.autodiff import BatchNormState
from lfmflow.errors import ConfigError, DataError, NumericalError, ShapeError

LOG_2PI = np.log(2.0 * np.pi)
SOFTPLUS_INV_1 = float(np.log(np.expm1(1.0)))
N_FEATURES = 4


# ----------------------------------------------------------------------------
# layout


def flatten(state) -> np.ndarray:
    """``d x T`` state to its time-major flattened vector."""
    state = np.asarray(state)
    return state.T.reshape(-1)


def unflatten(v, d: int) -> np.ndarray:
    v = np.asarray(v)
    if v.size % d:
        raise ShapeError(f"length {v.size} is not divisible by d={d}")
    return v.reshape(-1, d).T


def element_position(i: int, d: int) -> tuple[int, int]:
    """(time index, dimension) of flattened element ``i``."""
    return i // d, i % d


def dimension_mask(l: int, i, d: int):
    """1 where element ``i`` is updated by layer ``l``; layers cycle through dimensions."""
    if l < 1:
        raise ConfigError("layer index starts at 1")
    # the literal reading `i % l == 0` would not cycle through dimensions
    return (np.asarray(i) % d == l % d).astype(np.int64)


# ----------------------------------------------------------------------------
# features


@dataclass
class Observations:
    """Observation times with values and masks over the observable dims."""

    times: np.ndarray  # [N]
    y: np.ndarray  # [N, p]
    mask: np.ndarray  # [N, p]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        n = len(self.times)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 2:
            self.y = self.y.reshape(n, -1 if n else 1)
        self.mask = np.asarray(self.mask, dtype=np.float64).reshape(self.y.shape)

    @property
    def n(self) -> int:
        return len(self.times)


def mesh_indices(mesh: np.ndarray, times: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Mesh index of each observation time; off-mesh times raise DataError."""
    mesh = np.asarray(mesh, dtype=np.float64)
    idx = np.searchsorted(mesh, times - tol)
    idx = np.clip(idx, 0, len(mesh) - 1)
    off = np.abs(mesh[idx] - times) > tol
    if np.any(off):
        raise DataError(f"observation time {times[off][0]!r} is not on the mesh")
    return idx


@dataclass
class FeatureTensor:
    values: np.ndarray  # [T_flat, 4]: t, time-to-next, next y, obs mask
    raw_dtau: np.ndarray  # time-to-next before standardisation

    @property
    def obs_mask(self) -> np.ndarray:
        return self.values[:, 3]


def _standardise(x):
    s = x.std()
    return (x - x.mean()) / s if s > 0 else x - x.mean()


def build_features(model, mesh, data: Observations) -> FeatureTensor:
    mesh = np.asarray(mesh, dtype=np.float64)
    d, T = model.d, len(mesh)
    obs_dims = model.observed_dims
    idx = mesh_indices(mesh, data.times)
    t_ch = np.repeat(mesh, d)
    dtau = np.zeros(T * d)
    y_ch = np.zeros(T * d)
    m_ch = np.zeros(T * d)
    order = np.argsort(data.times)
    times, y, mask, idx = data.times[order], data.y[order], data.mask[order], idx[order]
    for k in range(T):
        nxt = np.searchsorted(idx, k)  # first observation at or after step k
        if nxt >= len(idx):
            continue
        base = k * d
        dtau[base:base + d] = times[nxt] - mesh[k]
        for p, dim in enumerate(obs_dims):
            if mask[nxt, p]:
                y_ch[base + dim] = y[nxt, p]
                if idx[nxt] == k:
                    m_ch[base + dim] = 1.0
    vals = np.stack([_standardise(t_ch), _standardise(dtau), y_ch, m_ch], axis=1)
    return FeatureTensor(vals, dtau)


# ----------------------------------------------------------------------------
# flow stack


@dataclass
class FlowConfig:
    receptive_field: int = 3
    channels: int = 32
    n_conv: int = 3
    n_layers: int | None = None  # default 2d
    batchnorm: bool = True
    bijector: list[str] | None = None  # per state dimension


@dataclass
class FlowStack:
    d: int
    T: int
    n_theta: int
    config: FlowConfig
    params: dict[str, np.ndarray]
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers or 2 * self.d

    @property
    def kernel_width(self) -> int:
        return self.config.receptive_field * self.d

    @property
    def t_flat(self) -> int:
        return self.d * self.T

    def positive_mask(self) -> np.ndarray:
        kinds = self.config.bijector or ["identity"] * self.d
        per_dim = np.array([k == "softplus" for k in kinds], dtype=np.float64)
        return np.tile(per_dim, self.T)


def init_flow_stack(d: int, T: int, n_theta: int, config: FlowConfig, rng) -> FlowStack:
    """Random network weights with an identity-initialised output layer."""
    if config.receptive_field < 1 or config.channels < 1 or config.n_conv < 1:
        raise ConfigError("receptive field, channels and n_conv must be >= 1")
    if config.bijector is not None:
        if len(config.bijector) != d:
            raise ConfigError("bijector needs one entry per state dimension")
        bad = set(config.bijector) - {"identity", "softplus"}
        if bad:
            raise ConfigError(f"unknown bijector(s) {sorted(bad)}")
    k = config.receptive_field * d
    C = config.channels
    p = {}

    def conv(name, cin, cout, width):
        p[name + ".W"] = rng.normal(size=(width, cin, cout)) / np.sqrt(width * cin)
        p[name + ".b"] = np.zeros(cout)

    n_layers = config.n_layers or 2 * d
    for l in range(1, n_layers + 1):
        pre = f"l{l}."
        conv(pre + "z", 1, C, k)
        p[pre + "feat.W"] = rng.normal(size=(k, N_FEATURES, C)) / np.sqrt(k * N_FEATURES)
        if n_theta:
            p[pre + "theta.W"] = rng.normal(size=(n_theta, C)) / np.sqrt(n_theta)
        for i in range(2, config.n_conv + 1):
            conv(pre + f"conv{i}", C, C, k)
            if config.batchnorm:
                p[pre + f"bn{i}.scale"] = np.ones(C)
                p[pre + f"bn{i}.offset"] = np.zeros(C)
        p[pre + "out.W"] = np.zeros((1, C, 2))
        p[pre + "out.b"] = np.array([0.0, SOFTPLUS_INV_1])
    return FlowStack(d, T, n_theta, config, p)


def autoregressive_nn(stack: FlowStack, l: int, z_prev, theta_u, features: FeatureTensor,
                      params=None, mode: str = "eval"):
    """Shift and scale for layer ``l``; each reads only earlier elements of ``z_prev``.

    ``z_prev`` is ``[M, T_flat]``; ``theta_u`` is ``[M, n_theta]`` (unconstrained
    parameter draws) or None. Returns ``(mu, sigma)``, each ``[M, T_flat]``.
    """
    P = stack.params if params is None else params
    pre = f"l{l}."
    x = ad.expand_dims(z_prev, -1)
    h = ad.causal_conv1d(x, P[pre + "z.W"], P[pre + "z.b"], strict=True)
    zero_b = np.zeros(stack.config.channels)
    h = h + ad.causal_conv1d(features.values, P[pre + "feat.W"], zero_b, strict=False)
    if stack.n_theta and theta_u is not None:
        h = h + ad.expand_dims(ad.matmul(theta_u, P[pre + "theta.W"]), -2)
    xi = ad.elu(h)
    for i in range(2, stack.config.n_conv + 1):
        xi = ad.causal_conv1d(ad.elu(xi), P[pre + f"conv{i}.W"], P[pre + f"conv{i}.b"], strict=False)
        if stack.config.batchnorm:
            state = stack.bn.setdefault(pre + f"bn{i}", BatchNormState())
            xi = ad.batch_norm(xi, P[pre + f"bn{i}.scale"], P[pre + f"bn{i}.offset"], state, mode)
    out = ad.causal_conv1d(xi, P[pre + "out.W"], P[pre + "out.b"], strict=False)
    mu = ad.getitem(out, (Ellipsis, 0))
    sigma = ad.softplus(ad.getitem(out, (Ellipsis, 1)))
    return mu, sigma


def apply_bijector(kind: str, z):
    """Return ``(h(z), sum log h'(z))`` for ``identity`` or ``softplus``."""
    if kind == "identity":
        return z, 0.0
    if kind == "softplus":
        return ad.softplus(z), ad.sum_(ad.log_sigmoid(z))
    raise ConfigError(f"unknown bijector {kind!r}")


def flow_forward(stack: FlowStack, eps, theta_u, features: FeatureTensor, params=None,
                 mode: str = "eval", check: bool = True):
    """Push base noise ``eps`` (``[M, T_flat]``) through the stack.

    Returns ``f`` with shape ``[M, T, d]`` and ``log_q`` with shape ``[M]``.
    """
    ev = ad.value(eps)
    if ev.ndim == 1:
        eps = ad.reshape(eps, (1, ev.shape[0]))
        ev = ad.value(eps)
    if ev.shape[-1] != stack.t_flat:
        raise ShapeError(f"base sample has {ev.shape[-1]} entries, expected {stack.t_flat}")
    idx = np.arange(stack.t_flat)
    z = eps
    log_sigma = 0.0
    for l in range(1, stack.n_layers + 1):
        delta = dimension_mask(l, idx, stack.d).astype(np.float64)
        mu, sigma = autoregressive_nn(stack, l, z, theta_u, features, params, mode)
        z = (delta * sigma + (1.0 - delta)) * z + delta * mu
        log_sigma = log_sigma + ad.sum_(delta * ad.log(sigma), axis=-1)
    pos = stack.positive_mask()
    if pos.any():
        f_flat = (1.0 - pos) * z + pos * ad.softplus(z)
        log_dh = ad.sum_(pos * ad.log_sigmoid(z), axis=-1)
    else:
        f_flat, log_dh = z, 0.0
    base = -0.5 * ad.sum_(ad.square(eps), axis=-1) - 0.5 * stack.t_flat * LOG_2PI
    log_q = base - log_sigma - log_dh
    if check and not np.all(np.isfinite(ad.value(log_q))):
        raise NumericalError("flow produced a non-finite log density")
    f = ad.reshape(f_flat, ev.shape[:-1] + (stack.T, stack.d))
    return f, log_q
