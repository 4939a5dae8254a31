"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lfmflow.errors import ConfigError, DataError
from lfmflow.flows import FlowConfig, mesh_indices
from lfmflow.inference import OptimizerConfig, Prior
from lfmflow.models import ModelSpec, make_model
from lfmflow.ssm import lengthscale_to_lambda
from lfmflow.unscented import COV_FLOOR, UTParams


@dataclass
class MeshConfig:
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 50  # number of mesh points

    def grid(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.steps)


@dataclass
class SimulationConfig:
    true_params: dict[str, float] = field(default_factory=dict)
    obs_times: list[float] = field(default_factory=list)
    noise: float | None = None  # Gaussian variance; None uses the model's
    x0: list[float] | None = None


@dataclass
class UTConfig:
    alpha: float = 1.0
    beta: float = 0.0
    kappa: float | None = None
    eta_convention: str = "minus_kappa"
    wc0: str = "ratio"
    diffusion_scaling: str = "additive"
    cov_floor: float = COV_FLOOR

    def params(self) -> UTParams:
        return UTParams(self.alpha, self.beta, self.kappa, self.eta_convention, self.wc0)


@dataclass
class ParamsConfig:
    fixed: dict[str, float] = field(default_factory=dict)
    init: dict[str, float] = field(default_factory=dict)
    init_scale: float = 0.1
    sigma0: float = 10.0
    lengthscale_convention: str = "reduced"  # or "standard"; see lengthscale_to_lambda


@dataclass
class OutputConfig:
    posterior_samples: int = 200
    theta_draws: int = 10_000


@dataclass
class OracleConfig:
    discretization: str = "euler"


@dataclass
class ExperimentConfig:
    model: str
    model_options: dict = field(default_factory=dict)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    data: str | None = None
    simulation: SimulationConfig | None = None
    params: ParamsConfig = field(default_factory=ParamsConfig)
    priors: dict[str, Prior] = field(default_factory=dict)
    flows: FlowConfig = field(default_factory=FlowConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ut: UTConfig = field(default_factory=UTConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0

    def build_model(self):
        return make_model(self.model, **self.model_options)

    def validate(self) -> "ExperimentConfig":
        if self.mesh.steps < 2:
            raise ConfigError("mesh.steps must be >= 2")
        if not self.mesh.t1 > self.mesh.t0:
            raise ConfigError("mesh.t1 must exceed mesh.t0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.oracle.discretization not in ("euler", "exact"):
            raise ConfigError(f"unknown discretization {self.oracle.discretization!r}")
        if self.ut.diffusion_scaling not in ("additive", "dt"):
            raise ConfigError(f"unknown diffusion scaling {self.ut.diffusion_scaling!r}")
        if not self.ut.cov_floor > 0:
            raise ConfigError("ut.cov_floor must be positive")
        if not (np.isfinite(self.params.sigma0) and self.params.sigma0 > 0):
            raise ConfigError("params.sigma0 must be finite and positive")
        self.ut.params()
        model = self.build_model()
        names = set(model.param_names)
        for where, keys in (("params.fixed", self.params.fixed), ("params.init", self.params.init),
                            ("priors", self.priors)):
            unknown = set(keys) - names
            if unknown:
                raise ConfigError(f"{where}: unknown parameter(s) {sorted(unknown)} for model "
                                  f"{self.model!r}")
        if self.simulation is not None:
            missing = names - set(self.simulation.true_params)
            missing.discard("noise_var")
            if missing:
                raise ConfigError(f"simulation.true_params lacks {sorted(missing)}")
            try:
                mesh_indices(self.mesh.grid(), np.asarray(self.simulation.obs_times, dtype=float))
            except DataError as exc:
                raise ConfigError(f"simulation.obs_times: {exc}") from None
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["priors"] = {k: asdict(v) for k, v in self.priors.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, raw, where: str):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        obj = cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return obj


def _convert_lengthscales(values: dict, model: ModelSpec, convention: str, where: str) -> dict:
    """Replace ``lengthscale[_j]`` entries by the matching ``lambda[_j]``."""
    out = dict(values)
    for j, b in enumerate(model.gp_blocks):
        lam = model.gp_param_names(j)[0]
        key = lam.replace("lambda", "lengthscale")
        if key not in out:
            continue
        if lam in out:
            raise ConfigError(f"{where}: give either {key!r} or {lam!r}, not both")
        ell = out.pop(key)
        if not (isinstance(ell, (int, float)) and ell > 0):
            raise ConfigError(f"{where}.{key} must be a positive number")
        out[lam] = lengthscale_to_lambda(float(ell), model.blocks[b].order, convention)
    return out


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "model" not in raw:
        raise ConfigError("config needs a 'model' entry")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    data = raw.get("data")
    if data is not None and not isinstance(data, str):
        raise ConfigError("data must be a path string")
    if data is not None and base_dir is not None and not Path(data).is_absolute():
        data = str((base_dir / data).resolve())
    priors_raw = raw.get("priors") or {}
    if not isinstance(priors_raw, dict):
        raise ConfigError("priors must be an object")
    priors = {k: _build(Prior, v, f"priors.{k}") for k, v in priors_raw.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    cfg = ExperimentConfig(
        model=str(raw["model"]),
        model_options=dict(raw.get("model_options") or {}),
        mesh=_build(MeshConfig, raw.get("mesh"), "mesh"),
        data=data,
        simulation=None if raw.get("simulation") is None
        else _build(SimulationConfig, raw["simulation"], "simulation"),
        params=_build(ParamsConfig, raw.get("params"), "params"),
        priors=priors,
        flows=_build(FlowConfig, raw.get("flows"), "flows"),
        optimizer=_build(OptimizerConfig, raw.get("optimizer"), "optimizer"),
        ut=_build(UTConfig, raw.get("ut"), "ut"),
        output=_build(OutputConfig, raw.get("output"), "output"),
        oracle=_build(OracleConfig, raw.get("oracle"), "oracle"),
        seed=seed,
    )
    model = cfg.build_model()
    conv = cfg.params.lengthscale_convention
    cfg.params.fixed = _convert_lengthscales(cfg.params.fixed, model, conv, "params.fixed")
    cfg.params.init = _convert_lengthscales(cfg.params.init, model, conv, "params.init")
    if cfg.simulation is not None:
        cfg.simulation.true_params = _convert_lengthscales(cfg.simulation.true_params, model, conv,
                                                           "simulation.true_params")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw, path.parent)
