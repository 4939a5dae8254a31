"""Exact posterior for linear models, matching the inference discretisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lfmflow.errors import ConfigError
from lfmflow.inference import Problem
from lfmflow.models import linear_part
from lfmflow.ssm import (FilterResult, LinearSSM, SmootherResult, ffbs_sample, kalman_filter,
                         rts_smooth, van_loan)
from lfmflow.unscented import euler_moment_step


@dataclass
class OracleResult:
    ssm: LinearSSM
    filtered: FilterResult
    smoothed: SmootherResult
    log_evidence: float

    def sample(self, n: int, seed) -> np.ndarray:
        return ffbs_sample(self.filtered, self.ssm, n, seed)


def _scalar_theta(problem: Problem, theta: dict) -> dict:
    missing = set(problem.model.param_names) - set(theta)
    if missing:
        raise ConfigError(f"oracle needs values for {sorted(missing)}")
    return {k: float(v) for k, v in theta.items()}


def linear_ssm(problem: Problem, theta: dict, discretization: str = "euler") -> LinearSSM:
    """Linear-Gaussian SSM on the mesh.

    ``euler`` reuses the unscented Euler moments (identical to the transition
    densities inside the ELBO); ``exact`` integrates the SDE exactly.
    """
    model = problem.model
    if model.likelihood.kind != "gaussian":
        raise ConfigError("the exact oracle needs a Gaussian likelihood")
    th = _scalar_theta(problem, theta)
    F, c = linear_part(model, th)
    d, mesh = model.d, problem.mesh
    T = len(mesh)
    A = np.zeros((T - 1, d, d))
    Q = np.zeros((T - 1, d, d))
    b = np.zeros((T - 1, d))
    if discretization == "euler":
        for k in range(T - 1):
            dt = mesh[k + 1] - mesh[k]
            m, P = euler_moment_step(model, np.zeros(d), th, mesh[k], dt, problem.ut,
                                     problem.diffusion_scaling, problem.cov_floor)
            A[k] = np.eye(d) + dt * F
            Q[k] = P
            b[k] = m
    elif discretization == "exact":
        if np.any(c != 0):
            raise ConfigError("exact discretisation supports homogeneous dynamics only")
        Qc = model.diffusion(th)
        for k in range(T - 1):
            A[k], Q[k] = van_loan(F, Qc, mesh[k + 1] - mesh[k])
    else:
        raise ConfigError(f"unknown discretisation {discretization!r}")

    P0 = np.zeros((d, d))
    gp = model.gp_blocks
    for i, (blk, off) in enumerate(zip(model.blocks, model.offsets)):
        sl = slice(off, off + blk.order)
        if i in gp:
            P0[sl, sl] = model.gp_stationary_cov(th, gp.index(i))
        else:
            P0[sl, sl] = problem.sigma0 ** 2 * np.eye(blk.order)
    H = np.eye(d)[model.observed_dims]
    R = th.get("noise_var", model.likelihood.noise_var)
    return LinearSSM(A, Q, H, float(R), np.zeros(d), P0, b)


def mesh_observations(problem: Problem) -> tuple[np.ndarray, np.ndarray]:
    """Observations scattered onto the mesh as ``[T, p]`` values and masks."""
    p = len(problem.model.observed_dims)
    y = np.zeros((problem.T, p))
    mask = np.zeros((problem.T, p))
    y[problem.obs_index] = problem.data.y
    mask[problem.obs_index] = problem.data.mask
    return y, mask


def exact_posterior(problem: Problem, theta: dict, discretization: str = "euler") -> OracleResult:
    ssm = linear_ssm(problem, theta, discretization)
    y, mask = mesh_observations(problem)
    filt = kalman_filter(ssm, y, mask)
    return OracleResult(ssm, filt, rts_smooth(filt, ssm), filt.log_evidence)
