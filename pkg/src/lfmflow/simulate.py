"""Synthetic datasets: exact GP forcing draws, RK4 integration and noisy emissions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lfmflow.errors import ConfigError, SimulationError
from lfmflow.flows import Observations, mesh_indices
from lfmflow.models import ModelSpec, joint_dynamics
from lfmflow.ssm import exact_discretize, matern_build


@dataclass
class Simulation:
    mesh: np.ndarray
    path: np.ndarray  # [T, d] joint state on the mesh
    data: Observations


def sample_gp_block(n: int, lam: float, v: float, times: np.ndarray, rng) -> np.ndarray:
    """Exact Matérn SSM draw on ``times``, shape ``[len(times), n]``."""
    out = np.zeros((len(times), n))
    if v == 0:
        return out
    ssm = matern_build(n, lam, v)
    out[0] = np.linalg.cholesky(ssm.P_inf) @ rng.standard_normal(n)
    for k in range(1, len(times)):
        A, Q = exact_discretize(ssm, times[k] - times[k - 1])
        w, V = np.linalg.eigh(Q)
        out[k] = A @ out[k - 1] + (V * np.sqrt(np.clip(w, 0.0, None))) @ rng.standard_normal(n)
    return out


def simulate_path(model: ModelSpec, mesh, theta: dict, rng, x0=None) -> np.ndarray:
    """GP forcing drawn exactly on mesh and midpoints; mechanistic rows by RK4."""
    mesh = np.asarray(mesh, dtype=np.float64)
    T, d = len(mesh), model.d
    fine = np.empty(2 * T - 1)
    fine[0::2] = mesh
    fine[1::2] = 0.5 * (mesh[:-1] + mesh[1:])
    full = np.zeros((len(fine), d))
    gp_idx = model.gp_blocks
    x_rows = []
    for i, (blk, off) in enumerate(zip(model.blocks, model.offsets)):
        sl = slice(off, off + blk.order)
        if i in gp_idx:
            lam_n, v_n = model.gp_param_names(gp_idx.index(i))
            full[:, sl] = sample_gp_block(blk.order, float(theta[lam_n]), float(theta[v_n]), fine, rng)
        else:
            x_rows += list(range(off, off + blk.order))
    x_rows = np.array(x_rows, dtype=int)
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64).ravel()
        if x0.size != x_rows.size:
            raise ConfigError(f"initial state needs {x_rows.size} mechanistic entries")
        full[0, x_rows] = x0

    def rhs(f, t):
        return np.asarray(joint_dynamics(model, f, t, theta, check=False))[x_rows]

    for k in range(T - 1):
        t, h = mesh[k], mesh[k + 1] - mesh[k]
        f0, fm, f1 = full[2 * k], full[2 * k + 1].copy(), full[2 * k + 2].copy()
        x = f0[x_rows]

        def at(state_row, xv):
            s = state_row.copy()
            s[x_rows] = xv
            return s

        k1 = rhs(f0, t)
        k2 = rhs(at(fm, x + 0.5 * h * k1), t + 0.5 * h)
        k3 = rhs(at(fm, x + 0.5 * h * k2), t + 0.5 * h)
        k4 = rhs(at(f1, x + h * k3), t + h)
        x_new = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x_new)):
            raise SimulationError(f"state became non-finite at t={mesh[k + 1]:.6g}")
        full[2 * k + 2, x_rows] = x_new
    return full[0::2]


def observe(model: ModelSpec, mesh, path: np.ndarray, obs_times, rng,
            noise_var: float | None = None) -> Observations:
    """Emit observations at ``obs_times`` under the model's likelihood."""
    obs_times = np.asarray(obs_times, dtype=np.float64)
    idx = mesh_indices(mesh, obs_times)
    h = np.asarray(model.emission(path[idx]))
    if model.likelihood.kind == "gaussian":
        nv = model.likelihood.noise_var if noise_var is None else noise_var
        y = h + np.sqrt(nv) * rng.standard_normal(h.shape)
    else:
        y = rng.poisson(np.exp(h)).astype(np.float64)
    return Observations(mesh[idx], y, np.ones_like(y))


def simulate(model: ModelSpec, mesh, theta: dict, obs_times, rng, x0=None,
             noise_var: float | None = None) -> Simulation:
    path = simulate_path(model, mesh, theta, rng, x0)
    return Simulation(np.asarray(mesh, dtype=np.float64), path,
                      observe(model, mesh, path, obs_times, rng, noise_var))
