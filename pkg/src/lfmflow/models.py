"""Latent force model registry.

A model is a joint companion system over ``f = [x, x', ..., u, u', ...]``.
Derivative-chain rows pass the next entry through; the bottom row of each
mechanistic block evaluates the ODE, and the bottom row of each GP block
evaluates the Matérn prior drift. Dynamics are written against
:mod:`lfmflow.autodiff` so the same code serves simulation (plain arrays)
and ELBO construction (traced tensors).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial
from typing import Callable

import numpy as np
from scipy.special import gammaln

from lfmflow import autodiff as ad
from lfmflow.errors import ConfigError, DataError, NumericalError
from lfmflow.ssm import matern_build

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Block:
    name: str
    kind: str  # "x" (mechanistic) or "gp" (Matérn forcing)
    order: int
    observed: bool = False
    positive: bool = False


@dataclass(frozen=True)
class ParamSpec:
    name: str
    constraint: str = "positive"  # or "real"


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str = "gaussian"  # or "poisson"
    noise_var: float = 0.25
    infer_noise: bool = False

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ConfigError(f"unknown likelihood {self.kind!r}")
        if self.kind == "gaussian" and not self.noise_var > 0:
            raise ConfigError("gaussian noise variance must be positive")


# (f_blocks, t, theta) -> list of top-derivative rows, one per x block
MechanisticRHS = Callable[[list, object, dict], list]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    blocks: tuple[Block, ...]
    params: tuple[ParamSpec, ...]
    rhs: MechanisticRHS
    likelihood: LikelihoodSpec = field(default_factory=LikelihoodSpec)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if not any(b.kind == "gp" for b in self.blocks):
            raise ConfigError("a model needs at least one GP block")

    # -- layout --------------------------------------------------------------
    @property
    def d(self) -> int:
        return sum(b.order for b in self.blocks)

    @property
    def offsets(self) -> list[int]:
        return [int(o) for o in np.cumsum([0] + [b.order for b in self.blocks])[:-1]]

    @property
    def row_names(self) -> list[str]:
        names = []
        for b in self.blocks:
            names += [b.name + "'" * i for i in range(b.order)]
        return names

    @property
    def gp_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.kind == "gp"]

    @property
    def top_rows(self) -> list[int]:
        """Rows receiving white noise: the last row of each GP block."""
        off = self.offsets
        return [off[i] + self.blocks[i].order - 1 for i in self.gp_blocks]

    @property
    def L_tilde(self) -> np.ndarray:
        L = np.zeros((self.d, len(self.gp_blocks)))
        for j, r in enumerate(self.top_rows):
            L[r, j] = 1.0
        return L

    @property
    def observed_dims(self) -> list[int]:
        off = self.offsets
        return [off[i] for i, b in enumerate(self.blocks) if b.observed]

    @property
    def positive_dims(self) -> list[int]:
        off = self.offsets
        return [off[i] for i, b in enumerate(self.blocks) if b.positive]

    @property
    def param_names(self) -> list[str]:
        names = [p.name for p in self.params]
        if self.likelihood.infer_noise:
            names.append("noise_var")
        return names

    @property
    def all_params(self) -> list[ParamSpec]:
        ps = list(self.params)
        if self.likelihood.infer_noise:
            ps.append(ParamSpec("noise_var", "positive"))
        return ps

    def gp_param_names(self, j: int) -> tuple[str, str]:
        """(lambda, v) parameter names of the j-th GP block."""
        suffix = "" if len(self.gp_blocks) == 1 else f"_{j}"
        return "lambda" + suffix, "v" + suffix

    # -- GP quantities (differentiable in theta) -----------------------------
    def gp_spectral_density(self, theta: dict, j: int):
        n = self.blocks[self.gp_blocks[j]].order
        lam, v = (theta[k] for k in self.gp_param_names(j))
        c = 2.0 ** (2 * n - 1) * factorial(n - 1) ** 2 / factorial(2 * n - 2)
        return c * v * ad.power(lam, 2 * n - 1)

    def gp_stationary_cov(self, theta: dict, j: int):
        """``P_inf`` of GP block j, shape ``[..., n, n]``."""
        n = self.blocks[self.gp_blocks[j]].order
        lam, v = (theta[k] for k in self.gp_param_names(j))
        base = matern_build(n, 1.0, 1.0).P_inf
        expo = np.add.outer(np.arange(n), np.arange(n)).astype(float)
        lam_e = ad.expand_dims(ad.expand_dims(lam, -1), -1)
        v_e = ad.expand_dims(ad.expand_dims(v, -1), -1)
        return v_e * ad.exp(ad.log(lam_e) * expo) * base

    def diffusion(self, theta: dict):
        """``Sigma = L_tilde Q_c L_tilde^T`` with Q_c the per-block noise density."""
        sigma = 0.0
        for j, r in enumerate(self.top_rows):
            E = np.zeros((self.d, self.d))
            E[r, r] = 1.0
            q = self.gp_spectral_density(theta, j)
            sigma = sigma + ad.expand_dims(ad.expand_dims(q, -1), -1) * E
        return sigma

    def emission(self, f):
        """Observable coordinates of the joint state, ``[..., p]``."""
        return ad.getitem(f, (Ellipsis, self.observed_dims))


def _split_blocks(model: ModelSpec, f) -> list[list]:
    out = []
    for b, off in zip(model.blocks, model.offsets):
        out.append([ad.getitem(f, (Ellipsis, off + i)) for i in range(b.order)])
    return out


def _matern_top(g: list, lam):
    n = len(g)
    top = 0.0
    for i in range(n):
        top = top - comb(n, i) * ad.power(lam, n - i) * g[i]
    return top


def joint_dynamics(model: ModelSpec, f, t, theta: dict, check: bool = True):
    """Drift ``D(f, t; theta)`` of the joint companion system, ``[..., d]``.

    ``theta`` values must broadcast against ``f[..., 0]``. With ``check`` a
    non-finite drift raises :class:`NumericalError` naming the row.
    """
    fv = ad.value(f)
    if fv.shape[-1] != model.d:
        raise ConfigError(f"state has {fv.shape[-1]} entries, model needs {model.d}")
    blocks = _split_blocks(model, f)
    tops = iter(model.rhs(blocks, t, theta))
    rows = []
    gp_j = 0
    for b, g in zip(model.blocks, blocks):
        rows += g[1:]
        if b.kind == "gp":
            lam, _ = model.gp_param_names(gp_j)
            rows.append(_matern_top(g, theta[lam]))
            gp_j += 1
        else:
            rows.append(next(tops))
    out = ad.stack(rows, axis=-1)
    vals = ad.value(out)
    if check and not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals.reshape(-1, model.d)))[0, 1]
        raise NumericalError(f"non-finite drift in row {bad} ({model.row_names[bad]})")
    return out


def log_likelihood(spec: LikelihoodSpec, y, h, mask, noise_var=None):
    """Masked observation log density summed over the last two axes.

    ``y``/``mask`` are ``[N, p]``; ``h`` is the emission ``[..., N, p]``.
    """
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not mask.any():
        return ad.sum_(ad.multiply(h, 0.0), axis=(-2, -1))
    y0 = np.where(mask > 0, y, 0.0)
    if spec.kind == "gaussian":
        # noise_var, when given, must broadcast against h
        s2 = spec.noise_var if noise_var is None else noise_var
        r = ad.subtract(y0, h)
        ll = -0.5 * ad.log(ad.multiply(2.0 * np.pi, s2)) - 0.5 * ad.square(r) / s2
    else:
        obs = y[mask > 0]
        if np.any(obs < 0) or np.any(obs != np.round(obs)):
            raise DataError("poisson observations must be non-negative integers")
        ll = ad.multiply(y0, h) - ad.exp(h) - gammaln(y0 + 1.0)
    return ad.sum_(ll * mask, axis=(-2, -1))


# ----------------------------------------------------------------------------
# built-in models


def _gp_block(order: int, name: str = "u", observed: bool = False) -> Block:
    return Block(name, "gp", order, observed=observed)


def _gp_params() -> list[ParamSpec]:
    return [ParamSpec("lambda"), ParamSpec("v")]


def _likelihood(opts: dict, default_kind="gaussian") -> LikelihoodSpec:
    return LikelihoodSpec(opts.get("likelihood", default_kind), float(opts.get("noise_var", 0.25)),
                          bool(opts.get("infer_noise", False)))


def matern_gp(**opts) -> ModelSpec:
    """Pure Matérn SSM observed through its first coordinate."""
    n = int(opts.get("gp_order", 2))
    return ModelSpec("matern-gp", (_gp_block(n, "f", observed=True),), tuple(_gp_params()),
                     lambda blocks, t, th: [], _likelihood(opts), dict(opts))


def poisson_gp(**opts) -> ModelSpec:
    n = int(opts.get("gp_order", 2))
    lik = LikelihoodSpec("poisson", 1.0, False)
    return ModelSpec("poisson-gp", (_gp_block(n, "f", observed=True),), tuple(_gp_params()),
                     lambda blocks, t, th: [], lik, dict(opts))


def spring(**opts) -> ModelSpec:
    """alpha0 x + alpha1 x' + x'' = u with constant coefficients."""
    n = int(opts.get("gp_order", 2))

    def rhs(blocks, t, th):
        x, u = blocks
        return [u[0] - th["alpha0"] * x[0] - th["alpha1"] * x[1]]

    params = (ParamSpec("alpha0"), ParamSpec("alpha1"), *_gp_params())
    return ModelSpec("spring", (Block("x", "x", 2, observed=True), _gp_block(n)), params, rhs,
                     _likelihood(opts), dict(opts))


def toy(**opts) -> ModelSpec:
    """dx/dt = -(2/3) sin(omega x) + u."""
    n = int(opts.get("gp_order", 2))

    def rhs(blocks, t, th):
        x, u = blocks
        return [u[0] - (2.0 / 3.0) * ad.sin(th["omega"] * x[0])]

    params = (ParamSpec("omega"), *_gp_params())
    return ModelSpec("toy", (Block("x", "x", 1, observed=True), _gp_block(n)), params, rhs,
                     _likelihood(opts), dict(opts))


def gene(**opts) -> ModelSpec:
    """Transcriptional regulation with a GP prior on g = log u."""
    n = int(opts.get("gp_order", 2))
    n_genes = int(opts.get("n_genes", 5))
    gamma = opts.get("gamma", [1.0] * n_genes)
    if len(gamma) != n_genes:
        raise ConfigError("gamma needs one Michaelis constant per gene")
    gamma = [float(g) for g in gamma]

    def rhs(blocks, t, th):
        u = ad.exp(blocks[-1][0])
        tops = []
        for i in range(n_genes):
            x = blocks[i][0]
            resp = u / (u + gamma[i])
            tops.append(th[f"a{i + 1}"] - th[f"b{i + 1}"] * x + th[f"s{i + 1}"] * resp)
        return tops

    xb = tuple(Block(f"x{i + 1}", "x", 1, observed=True, positive=True) for i in range(n_genes))
    params = []
    for i in range(n_genes):
        params += [ParamSpec(f"a{i + 1}"), ParamSpec(f"b{i + 1}"), ParamSpec(f"s{i + 1}")]
    opts = dict(opts, gamma=gamma)
    return ModelSpec("gene", xb + (_gp_block(n, "g"),), tuple(params + _gp_params()), rhs,
                     _likelihood(opts), opts)


_REGISTRY: dict[str, Callable[..., ModelSpec]] = {
    "matern-gp": matern_gp,
    "spring": spring,
    "toy": toy,
    "gene": gene,
    "poisson-gp": poisson_gp,
}


def builtin_models() -> dict[str, Callable[..., ModelSpec]]:
    return dict(_REGISTRY)


def register_model(name: str, factory: Callable[..., ModelSpec]) -> None:
    """Extension point for programmatically defined models."""
    _REGISTRY[name] = factory


def make_model(name: str, **options) -> ModelSpec:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**options)


def linear_part(model: ModelSpec, theta: dict, t: float = 0.0, tol: float = 1e-9):
    """Return ``(F, c)`` with ``D(f) = F f + c`` or raise naming a non-linear row."""
    d = model.d
    c = np.asarray(joint_dynamics(model, np.zeros(d), t, theta), dtype=float)
    F = np.stack([np.asarray(joint_dynamics(model, np.eye(d)[i], t, theta)) - c
                  for i in range(d)], axis=1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.normal(size=(2, d)) * 2.0
        lhs = np.asarray(joint_dynamics(model, a + b, t, theta))
        rhs = F @ (a + b) + c
        bad = np.abs(lhs - rhs) > tol * (1.0 + np.abs(rhs))
        if bad.any():
            row = int(np.argmax(bad))
            raise ConfigError(f"model {model.name!r} is non-linear in row {row} "
                              f"({model.row_names[row]})")
    return F, c
