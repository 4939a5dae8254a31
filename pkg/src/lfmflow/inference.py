"""Variational inference: parameter posterior, ELBO assembly and training."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lfmflow import autodiff as ad
from lfmflow.errors import ConfigError, NumericalError
from lfmflow.flows import (FeatureTensor, FlowConfig, FlowStack, Observations, build_features,
                           flow_forward, init_flow_stack, mesh_indices)
from lfmflow.models import ModelSpec, log_likelihood
from lfmflow.unscented import COV_FLOOR, UTParams, euler_moment_step, transition_log_density

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
SOFTPLUS_INV = lambda y: float(np.log(np.expm1(y)))  # noqa: E731


# ----------------------------------------------------------------------------
# priors and the parameter posterior


@dataclass(frozen=True)
class Prior:
    family: str  # "normal" on real values or "lognormal" on positive values
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in ("normal", "lognormal"):
            raise ConfigError(f"unsupported prior family {self.family!r}")
        if not self.scale > 0:
            raise ConfigError("prior scale must be positive")

    def log_density(self, theta):
        if self.family == "normal":
            z = (theta - self.loc) / self.scale
            return -0.5 * ad.square(z) - np.log(self.scale) - 0.5 * LOG_2PI
        lt = ad.log(theta)
        z = (lt - self.loc) / self.scale
        return -0.5 * ad.square(z) - np.log(self.scale) - 0.5 * LOG_2PI - lt


def default_prior(constraint: str) -> Prior:
    return Prior("lognormal", 0.0, 1.0) if constraint == "positive" else Prior("normal", 0.0, 2.0)


def log_prior_theta(theta: dict, priors: dict[str, Prior]):
    """Sum of independent prior log densities over the entries of ``priors``."""
    total = 0.0
    for name, prior in priors.items():
        if not isinstance(prior, Prior):
            raise ConfigError(f"prior for {name!r} is not a Prior")
        total = total + prior.log_density(theta[name])
    return total


@dataclass
class VariationalPosterior:
    """Mean-field Gaussian over unconstrained parameters.

    Positive parameters are ``exp`` of their unconstrained value.
    """

    names: list[str]
    positive: np.ndarray  # bool per parameter
    mu: np.ndarray
    s: np.ndarray  # pre-softplus scale

    @property
    def scale(self) -> np.ndarray:
        return np.logaddexp(0.0, self.s)

    @classmethod
    def create(cls, names, constraints, init: dict | None = None, init_scale: float = 0.1):
        init = init or {}
        positive = np.array([c == "positive" for c in constraints])
        mu = np.zeros(len(names))
        for i, n in enumerate(names):
            if n in init:
                v = float(init[n])
                if positive[i] and not v > 0:
                    raise ConfigError(f"initial value of positive parameter {n!r} must be > 0")
                mu[i] = np.log(v) if positive[i] else v
        s = np.full(len(names), SOFTPLUS_INV(init_scale))
        return cls(list(names), positive, mu, s)


def sample_theta(vp: VariationalPosterior, eps_theta, mu=None, s=None):
    """Reparameterised draw ``(theta, theta_u, log_q_theta)``.

    ``eps_theta`` is ``[M, n]``; ``mu`` and ``s`` default to the stored
    values but may be traced tensors. ``log_q_theta`` is the density of the
    constrained draw.
    """
    mu = vp.mu if mu is None else mu
    s = vp.s if s is None else s
    eps_theta = np.atleast_2d(np.asarray(eps_theta, dtype=np.float64))
    scale = ad.softplus(s)
    u = eps_theta * scale + mu
    pos = vp.positive.astype(np.float64)
    theta = u * (1.0 - pos) + ad.exp(u) * pos if pos.any() else u
    log_q = (-0.5 * np.sum(eps_theta ** 2, axis=-1) - ad.sum_(ad.log(scale))
             - 0.5 * len(vp.names) * LOG_2PI)
    if pos.any():
        log_q = log_q - ad.sum_(u * pos, axis=-1)
    return theta, u, log_q


def initial_state_log_density(f0, theta: dict, model: ModelSpec, sigma0: float = 10.0):
    """Stationary GP prior on GP blocks plus N(0, sigma0^2) on mechanistic rows."""
    if not (np.isfinite(sigma0) and sigma0 > 0):
        raise ConfigError("sigma0 must be finite and positive")
    total = 0.0
    gp = set(model.gp_blocks)
    for i, (b, off) in enumerate(zip(model.blocks, model.offsets)):
        part = ad.getitem(f0, (Ellipsis, slice(off, off + b.order)))
        if i in gp:
            j = model.gp_blocks.index(i)
            P = model.gp_stationary_cov(theta, j)
            L = ad.cholesky(P)
            z = ad.solve_triangular(L, ad.expand_dims(part, -1))
            idx = np.arange(b.order)
            logdet = ad.sum_(ad.log(ad.getitem(L, (Ellipsis, idx, idx))), axis=-1)
            total = total - 0.5 * ad.sum_(ad.square(z), axis=(-2, -1)) - logdet \
                - 0.5 * b.order * LOG_2PI
        else:
            total = total + ad.sum_(-0.5 * ad.square(part / sigma0), axis=-1) \
                - b.order * (np.log(sigma0) + 0.5 * LOG_2PI)
    return total


# ----------------------------------------------------------------------------
# problem definition


@dataclass
class Problem:
    """Everything the ELBO needs besides the variational parameters."""

    model: ModelSpec
    mesh: np.ndarray
    data: Observations
    ut: UTParams = field(default_factory=UTParams)
    diffusion_scaling: str = "additive"
    cov_floor: float = COV_FLOOR
    sigma0: float = 10.0
    fixed: dict[str, float] = field(default_factory=dict)
    priors: dict[str, Prior] = field(default_factory=dict)

    def __post_init__(self):
        self.mesh = np.asarray(self.mesh, dtype=np.float64)
        if self.mesh.ndim != 1 or len(self.mesh) < 2 or np.any(np.diff(self.mesh) <= 0):
            raise ConfigError("mesh must be strictly increasing with at least 2 points")
        names = self.model.param_names
        unknown = (set(self.fixed) | set(self.priors)) - set(names)
        if unknown:
            raise ConfigError(f"unknown parameter(s) {sorted(unknown)}")
        if not self.cov_floor > 0:
            raise ConfigError("cov_floor must be positive")
        specs = {p.name: p for p in self.model.all_params}
        for n in self.free_names:
            if n not in self.priors:
                self.priors[n] = default_prior(specs[n].constraint)
        self.obs_index = mesh_indices(self.mesh, self.data.times)
        self.features: FeatureTensor = build_features(self.model, self.mesh, self.data)
        self.dt = np.diff(self.mesh)

    @property
    def free_names(self) -> list[str]:
        return [n for n in self.model.param_names if n not in self.fixed]

    @property
    def free_constraints(self) -> list[str]:
        specs = {p.name: p for p in self.model.all_params}
        return [specs[n].constraint for n in self.free_names]

    @property
    def T(self) -> int:
        return len(self.mesh)


def theta_dict(problem: Problem, theta, batch: int) -> dict:
    """Named parameters shaped ``[M, 1]`` (free draws and broadcast fixed values)."""
    out = {}
    for i, n in enumerate(problem.free_names):
        out[n] = ad.getitem(theta, (slice(None), slice(i, i + 1)))
    for n, v in problem.fixed.items():
        out[n] = np.full((batch, 1), float(v))
    return out


def log_joint(problem: Problem, f, theta: dict):
    """``log p(theta) + log p(f0|theta) + transitions + likelihood``, per sample."""
    model = problem.model
    T = problem.T
    free = {n: theta[n] for n in problem.free_names}
    lp = log_prior_theta({n: ad.getitem(v, (slice(None), 0)) for n, v in free.items()},
                         problem.priors)
    th0 = {n: ad.getitem(v, (slice(None), 0)) for n, v in theta.items()}
    f0 = ad.getitem(f, (slice(None), 0))
    lp = lp + initial_state_log_density(f0, th0, model, problem.sigma0)
    f_prev = ad.getitem(f, (slice(None), slice(0, T - 1)))
    f_next = ad.getitem(f, (slice(None), slice(1, T)))
    m, P = euler_moment_step(model, f_prev, theta, problem.mesh[:-1], problem.dt, problem.ut,
                             problem.diffusion_scaling, problem.cov_floor)
    lp = lp + ad.sum_(transition_log_density(f_next, m, P), axis=-1)
    if problem.data.n:
        h = model.emission(ad.getitem(f, (slice(None), problem.obs_index)))
        noise = None
        if model.likelihood.kind == "gaussian":
            nv = theta.get("noise_var")
            noise = model.likelihood.noise_var if nv is None else ad.expand_dims(nv, -1)
        lp = lp + log_likelihood(model.likelihood, problem.data.y, h, problem.data.mask, noise)
    return lp


# ----------------------------------------------------------------------------
# ELBO


@dataclass
class TrainState:
    flow: FlowStack
    vp: VariationalPosterior
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def params(self) -> dict[str, np.ndarray]:
        p = dict(self.flow.params)
        p["vp.mu"] = self.vp.mu
        p["vp.s"] = self.vp.s
        return p

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        for k in self.flow.params:
            self.flow.params[k] = p[k]
        self.vp.mu = p["vp.mu"]
        self.vp.s = p["vp.s"]


def init_state(problem: Problem, flow_cfg: FlowConfig, seed: int, init: dict | None = None,
               init_scale: float = 0.1) -> TrainState:
    cfg = copy.copy(flow_cfg)
    if cfg.bijector is None and problem.model.positive_dims:
        kinds = ["identity"] * problem.model.d
        for dim in problem.model.positive_dims:
            kinds[dim] = "softplus"
        cfg.bijector = kinds
    init_rng = np.random.default_rng([seed, 1])
    vp = VariationalPosterior.create(problem.free_names, problem.free_constraints, init, init_scale)
    stack = init_flow_stack(problem.model.d, problem.T, len(vp.names), cfg, init_rng)
    state = TrainState(stack, vp, {}, {}, 0, np.random.default_rng([seed, 2]))
    state.adam_m = {k: np.zeros_like(v) for k, v in state.params().items()}
    state.adam_v = {k: np.zeros_like(v) for k, v in state.params().items()}
    return state


def _sample_terms(state: TrainState, problem: Problem, eps_f, eps_t, params, mode):
    """Per-sample ELBO terms; ``params`` may hold traced tensors."""
    vp = state.vp
    M = eps_f.shape[0]
    theta, theta_u, log_qt = sample_theta(vp, eps_t, params["vp.mu"], params["vp.s"])
    f, log_qf = flow_forward(state.flow, eps_f, theta_u if len(vp.names) else None,
                             problem.features, params, mode, check=False)
    lj = log_joint(problem, f, theta_dict(problem, theta, M))
    return lj - log_qt - log_qf


def _per_sample_finite(state, problem, eps_f, eps_t) -> np.ndarray:
    """Finite mask computed one sample at a time (values only, eval mode)."""
    ok = np.zeros(len(eps_f), dtype=bool)
    p = state.params()
    for i in range(len(eps_f)):
        try:
            with np.errstate(all="ignore"):
                v = _sample_terms(state, problem, eps_f[i:i + 1], eps_t[i:i + 1], p, "eval")
            ok[i] = bool(np.all(np.isfinite(v)))
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError):
            ok[i] = False
    return ok


@dataclass
class ElboDiagnostics:
    per_sample: np.ndarray
    dropped: int


def elbo_estimate(state: TrainState, problem: Problem, M: int, rng, mode: str = "train"):
    """Monte Carlo ELBO on a fresh trace; returns ``(elbo, leaves, diagnostics)``.

    ``leaves`` maps parameter names to traced leaves so the caller can read
    gradients after :func:`autodiff.backward`. Non-finite samples are
    dropped and the trace rebuilt from the remaining ones.
    """
    if M < 1:
        raise ConfigError("need at least one Monte Carlo sample")
    eps_f = rng.standard_normal((M, problem.model.d * problem.T))
    eps_t = rng.standard_normal((M, len(state.vp.names)))
    keep = np.ones(M, dtype=bool)
    bn_backup = copy.deepcopy(state.flow.bn)
    for attempt in range(2):
        n_keep = int(keep.sum())
        use_mode = mode
        if mode == "train" and state.flow.config.batchnorm and n_keep < 2:
            use_mode = "eval"
        trace = ad.Trace()
        leaves = {k: trace.leaf(v, name=k) for k, v in state.params().items()}
        try:
            with np.errstate(all="ignore"):
                terms = _sample_terms(state, problem, eps_f[keep], eps_t[keep], leaves, use_mode)
            vals = ad.value(terms)
            finite = np.isfinite(vals)
        except (NumericalError, np.linalg.LinAlgError):
            finite = None
        if finite is not None and finite.all():
            elbo = ad.mean(terms)
            return elbo, leaves, ElboDiagnostics(vals, M - n_keep)
        state.flow.bn = copy.deepcopy(bn_backup)
        trace.release()
        if attempt == 0:
            if finite is None:
                keep = _per_sample_finite(state, problem, eps_f, eps_t)
            else:
                keep[np.flatnonzero(keep)[~finite]] = False
            log.info("dropping %d non-finite sample(s)", M - int(keep.sum()))
            if not keep.any():
                break
    raise NumericalError(f"all {M} Monte Carlo samples were non-finite")


def evaluate_elbo(state: TrainState, problem: Problem, n_samples: int = 256, seed=0,
                  batch: int = 64) -> tuple[float, float]:
    """Mean and Monte Carlo standard error of the ELBO (eval mode, no gradients)."""
    rng = np.random.default_rng(seed)
    vals = []
    p = state.params()
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        eps_f = rng.standard_normal((m, problem.model.d * problem.T))
        eps_t = rng.standard_normal((m, len(state.vp.names)))
        with np.errstate(all="ignore"):
            vals.append(np.asarray(_sample_terms(state, problem, eps_f, eps_t, p, "eval")))
        done += m
    v = np.concatenate(vals)
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite ELBO sample in evaluation")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerConfig:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    epochs: int = 1000
    mc_samples: int = 8
    max_failed_epochs: int = 3
    average_last: int = 0  # average the iterates of the final K epochs (0: keep the last)

    def __post_init__(self):
        if not (self.lr > 0 and self.clip_norm > 0 and self.epochs >= 0 and self.mc_samples >= 1):
            raise ConfigError("optimizer needs lr > 0, clip_norm > 0, epochs >= 0, mc_samples >= 1")
        if not 0 <= self.average_last <= self.epochs:
            raise ConfigError("average_last must lie in [0, epochs]")


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients jointly so their global norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params, grads, m, v, t: int, cfg: OptimizerConfig):
    """One ascent step (gradients of the objective to maximise)."""
    out = {}
    b1, b2 = cfg.beta1, cfg.beta2
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        mh = m[k] / (1 - b1 ** t)
        vh = v[k] / (1 - b2 ** t)
        out[k] = p + cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
    return out


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    grad_norm: float
    dropped: int


def train_step(state: TrainState, problem: Problem, cfg: OptimizerConfig) -> EpochRecord:
    elbo, leaves, diag = elbo_estimate(state, problem, cfg.mc_samples, state.rng, "train")
    ad.backward(elbo)
    grads = {k: leaf.grad for k, leaf in leaves.items()}
    elbo.trace.release()
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    state.epoch += 1
    state.set_params(adam_step(state.params(), grads, state.adam_m, state.adam_v, state.epoch, cfg))
    return EpochRecord(state.epoch, float(ad.value(elbo)), norm, diag.dropped)


def train(problem: Problem, flow_cfg: FlowConfig, cfg: OptimizerConfig, seed: int,
          init: dict | None = None, callback: Callable[[TrainState, EpochRecord], None] | None = None,
          state: TrainState | None = None):
    """Run ``cfg.epochs`` Adam steps; returns ``(state, records)``.

    ``callback(state, record)`` runs after every epoch. With
    ``cfg.average_last = K`` the returned parameters are the mean of the
    iterates after each of the final K epochs.
    """
    if state is None:
        state = init_state(problem, flow_cfg, seed, init)
    records: list[EpochRecord] = []
    failed = 0
    running = None
    for i in range(cfg.epochs):
        try:
            rec = train_step(state, problem, cfg)
            failed = 0
        except NumericalError as exc:
            failed += 1
            state.epoch += 1
            rec = EpochRecord(state.epoch, float("nan"), float("nan"), cfg.mc_samples)
            if failed >= cfg.max_failed_epochs:
                raise NumericalError(f"aborting at epoch {state.epoch}: {failed} consecutive "
                                     f"epochs with every sample non-finite ({exc})") from exc
        records.append(rec)
        if i >= cfg.epochs - cfg.average_last:
            p = state.params()
            running = {k: v.copy() for k, v in p.items()} if running is None \
                else {k: running[k] + v for k, v in p.items()}
        if callback is not None:
            callback(state, rec)
    if running is not None:
        state.set_params({k: v / cfg.average_last for k, v in running.items()})
    return state, records


# ----------------------------------------------------------------------------
# posterior sampling


def sample_posterior(state: TrainState, problem: Problem, n: int, seed=0, batch: int = 100):
    """``n`` joint draws ``(f [n, T, d], theta {name: [n]})`` from q, eval mode."""
    rng = np.random.default_rng(seed)
    fs, thetas = [], []
    p = state.params()
    attempts = 0
    while sum(len(x) for x in fs) < n:
        attempts += 1
        if attempts > 100:
            raise NumericalError("could not draw enough finite posterior samples")
        m = min(batch, n - sum(len(x) for x in fs))
        eps_f = rng.standard_normal((m, problem.model.d * problem.T))
        eps_t = rng.standard_normal((m, len(state.vp.names)))
        theta, theta_u, _ = sample_theta(state.vp, eps_t)
        with np.errstate(all="ignore"):
            f, _ = flow_forward(state.flow, eps_f, theta_u if len(state.vp.names) else None,
                                problem.features, p, "eval", check=False)
        ok = np.all(np.isfinite(f.reshape(m, -1)), axis=1) & np.all(np.isfinite(theta), axis=1)
        fs.append(f[ok])
        thetas.append(theta[ok])
    f = np.concatenate(fs)[:n]
    th = np.concatenate(thetas)[:n]
    out = {name: th[:, i] for i, name in enumerate(state.vp.names)}
    for name, v in problem.fixed.items():
        out[name] = np.full(n, float(v))
    return f, out


def theta_summary(vp: VariationalPosterior, n: int = 10_000, seed=0) -> dict[str, dict]:
    """Mean and SD of each constrained marginal from ``n`` draws."""
    rng = np.random.default_rng(seed)
    theta, _, _ = sample_theta(vp, rng.standard_normal((n, len(vp.names))))
    return {name: {"mean": float(theta[:, i].mean()), "sd": float(theta[:, i].std(ddof=1))}
            for i, name in enumerate(vp.names)}
