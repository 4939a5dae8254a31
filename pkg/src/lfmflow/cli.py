"""Command-line entry point: simulate, fit, oracle and criticize."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from lfmflow import io
from lfmflow.config import ExperimentConfig, load_config
from lfmflow.criticism import two_sample_test
from lfmflow.errors import ConfigError, DataError, LFMError
from lfmflow.inference import Problem, sample_posterior, theta_summary, train
from lfmflow.oracle import exact_posterior
from lfmflow.simulate import simulate

log = logging.getLogger("lfmflow")

STREAMS = {"simulate": 1, "fit": 2, "oracle": 3, "criticize": 4, "posterior": 5}


def stream_seed(seed: int, name: str) -> int:
    """Independent 64-bit seed for a named sub-stream of the config seed."""
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1, np.uint64)[0])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _observed_names(model) -> list[str]:
    return [model.row_names[i] for i in model.observed_dims]


def load_problem(cfg: ExperimentConfig, data_path) -> Problem:
    model = cfg.build_model()
    path = data_path or cfg.data
    if path is None:
        raise ConfigError("no data file given (use --data or the config's 'data' entry)")
    data = io.read_data_csv(path, _observed_names(model))
    return Problem(model, cfg.mesh.grid(), data, cfg.ut.params(), cfg.ut.diffusion_scaling,
                   cfg.ut.cov_floor, cfg.params.sigma0, dict(cfg.params.fixed), dict(cfg.priors))


def cmd_simulate(args) -> None:
    cfg = load_config(args.config)
    if cfg.simulation is None:
        raise ConfigError("config has no 'simulation' block")
    model = cfg.build_model()
    mesh = cfg.mesh.grid()
    rng = np.random.default_rng(stream_seed(cfg.seed, "simulate"))
    sim = simulate(model, mesh, cfg.simulation.true_params, cfg.simulation.obs_times, rng,
                   cfg.simulation.x0, cfg.simulation.noise)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_data_csv(out / "data.csv", sim.data, _observed_names(model))
    io.write_path_csv(out / "truth.csv", mesh, sim.path, model.row_names)
    _write_json(out / "config_resolved.json", cfg.to_dict())


def cmd_fit(args) -> None:
    cfg = load_config(args.config)
    problem = load_problem(cfg, args.data)
    seed = stream_seed(cfg.seed, "fit")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    every = max(1, cfg.optimizer.epochs // 20)

    def progress(state, rec):
        if rec.epoch % every == 0:
            log.info("epoch %d elbo %.4f grad_norm %.3g", rec.epoch, rec.elbo, rec.grad_norm)

    state, records = train(problem, cfg.flows, cfg.optimizer, seed, cfg.params.init, progress)
    io.write_elbo_csv(out / "elbo_trace.csv", records)
    f, _ = sample_posterior(state, problem, cfg.output.posterior_samples,
                            stream_seed(cfg.seed, "posterior"))
    io.write_samples_csv(out / "posterior_samples.csv", problem.mesh, f)
    summary = theta_summary(state.vp, cfg.output.theta_draws, stream_seed(cfg.seed, "posterior"))
    for name, v in problem.fixed.items():
        summary[name] = {"mean": float(v), "sd": 0.0}
    _write_json(out / "theta_posterior.json", summary)
    resolved = cfg.to_dict()
    resolved["data"] = str(Path(args.data or cfg.data).resolve())
    _write_json(out / "config_resolved.json", resolved)


def cmd_oracle(args) -> None:
    cfg = load_config(args.config)
    problem = load_problem(cfg, args.data)
    theta = dict(cfg.simulation.true_params) if cfg.simulation else {}
    theta.update(cfg.params.fixed)
    theta = {k: v for k, v in theta.items() if k in problem.model.param_names}
    res = exact_posterior(problem, theta, cfg.oracle.discretization)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = res.sample(cfg.output.posterior_samples, stream_seed(cfg.seed, "oracle"))
    io.write_samples_csv(out / "posterior_samples.csv", problem.mesh, samples)
    _write_json(out / "evidence.json", {"log_evidence": res.log_evidence})
    resolved = cfg.to_dict()
    resolved["data"] = str(Path(args.data or cfg.data).resolve())
    _write_json(out / "config_resolved.json", resolved)


def cmd_criticize(args) -> None:
    ta, dims_a, A = io.read_samples_csv(args.a)
    tb, dims_b, B = io.read_samples_csv(args.b)
    if len(ta) != len(tb) or not np.allclose(ta, tb, rtol=0, atol=1e-9):
        raise DataError("sample files use different meshes")
    dims = sorted(set(dims_a) & set(dims_b)) if args.dims is None else args.dims
    missing = [d for d in dims if d not in dims_a or d not in dims_b]
    if missing or not dims:
        raise DataError(f"dimension(s) {missing or dims} not present in both sample files")
    A = A[:, :, [dims_a.index(d) for d in dims]].reshape(len(A), -1)
    B = B[:, :, [dims_b.index(d) for d in dims]].reshape(len(B), -1)
    verdict = two_sample_test(A, B, args.permutations, args.alpha, args.seed)
    if args.out:
        _write_json(Path(args.out), verdict)
    print(json.dumps(verdict))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfmflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic dataset and its true path")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("fit", cmd_fit, "train the variational posterior"),
                                 ("oracle", cmd_oracle, "exact posterior for linear models")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--data")
        s.add_argument("--out-dir", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("criticize", help="MMD two-sample test between two sample files")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--permutations", type=int, default=200)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=int, nargs="+", help="state indices to compare (default: all shared)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_criticize)
    return p


def thread_limit() -> int | None:
    """Value of ``LFM_THREADS``; computation is single-threaded, so any limit >= 1 holds."""
    raw = os.environ.get("LFM_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"LFM_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        thread_limit()
        args.func(args)
    except LFMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
