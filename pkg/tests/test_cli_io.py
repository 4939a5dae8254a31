import json

import numpy as np
import pytest

from lfmflow import cli, io
from lfmflow.config import from_dict, load_config
from lfmflow.errors import ConfigError, DataError, NumericalError
from lfmflow.flows import Observations

MESH = {"t0": 0.0, "t1": 2.0, "steps": 11}
OBS = [0.4, 1.0, 1.6]


def write_config(path, **overrides):
    cfg = {
        "model": "matern-gp",
        "model_options": {"gp_order": 1},
        "mesh": MESH,
        "simulation": {"true_params": {"lambda": 1.0, "v": 1.0}, "obs_times": OBS},
        "flows": {"channels": 4, "n_conv": 2, "batchnorm": False},
        "optimizer": {"epochs": 5, "mc_samples": 2},
        "output": {"posterior_samples": 7, "theta_draws": 100},
        "seed": 3,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def simulated(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "sim")]) == 0
    return cfg, tmp_path / "sim"


# -- simulate -----------------------------------------------------------------


def test_simulate_outputs(simulated):
    _, out = simulated
    data = io.read_data_csv(out / "data.csv", ["f"])
    np.testing.assert_allclose(data.times, OBS)
    np.testing.assert_array_equal(data.mask, 1.0)
    mesh, path, names = io.read_path_csv(out / "truth.csv")
    assert names == ["f"] and path.shape == (11, 1)
    resolved = json.loads((out / "config_resolved.json").read_text())
    assert resolved["ut"]["cov_floor"] == 1e-8 and resolved["flows"]["receptive_field"] == 3


def test_simulate_is_deterministic(simulated, tmp_path):
    cfg, out = simulated
    cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "again")])
    assert (out / "data.csv").read_bytes() == (tmp_path / "again" / "data.csv").read_bytes()


def test_simulation_noise_matches_configured_variance(tmp_path):
    times = list(np.linspace(0, 2, 11))
    cfg = write_config(tmp_path / "c.json", simulation={
        "true_params": {"lambda": 1.0, "v": 1.0}, "obs_times": times, "noise": 0.04})
    rs = []
    for seed in range(40):
        raw = json.loads(cfg.read_text())
        raw["seed"] = seed
        cfg.write_text(json.dumps(raw))
        cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "s")])
        data = io.read_data_csv(tmp_path / "s" / "data.csv", ["f"])
        _, path, _ = io.read_path_csv(tmp_path / "s" / "truth.csv")
        rs.append(data.y[:, 0] - path[:, 0])
    assert np.var(np.concatenate(rs)) == pytest.approx(0.04, rel=0.2)


# -- fit and oracle -----------------------------------------------------------


def test_fit_writes_artifacts_and_reproduces(simulated, tmp_path):
    cfg, sim = simulated
    out = tmp_path / "fit"
    assert cli.main(["fit", "--config", str(cfg), "--data", str(sim / "data.csv"), "--out-dir", str(out)]) == 0
    trace = (out / "elbo_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,elbo,grad_norm,dropped_samples" and len(trace) == 6
    mesh, dims, samples = io.read_samples_csv(out / "posterior_samples.csv")
    assert samples.shape == (7, 11, 1) and dims == [0]
    theta = json.loads((out / "theta_posterior.json").read_text())
    assert set(theta) == {"lambda", "v"} and theta["v"]["sd"] > 0

    out2 = tmp_path / "refit"
    assert cli.main(["fit", "--config", str(out / "config_resolved.json"), "--out-dir", str(out2)]) == 0
    assert (out / "elbo_trace.csv").read_bytes() == (out2 / "elbo_trace.csv").read_bytes()
    assert (out / "posterior_samples.csv").read_bytes() == (out2 / "posterior_samples.csv").read_bytes()


def test_fixed_parameters_reported_with_zero_sd(simulated, tmp_path):
    cfg, sim = simulated
    raw = json.loads(cfg.read_text())
    raw["params"] = {"fixed": {"v": 1.0}}
    cfg.write_text(json.dumps(raw))
    cli.main(["fit", "--config", str(cfg), "--data", str(sim / "data.csv"), "--out-dir", str(tmp_path / "f")])
    theta = json.loads((tmp_path / "f" / "theta_posterior.json").read_text())
    assert theta["v"] == {"mean": 1.0, "sd": 0.0}


def test_oracle_outputs(simulated, tmp_path):
    cfg, sim = simulated
    out = tmp_path / "orc"
    assert cli.main(["oracle", "--config", str(cfg), "--data", str(sim / "data.csv"), "--out-dir", str(out)]) == 0
    ev = json.loads((out / "evidence.json").read_text())["log_evidence"]
    assert np.isfinite(ev)
    _, _, samples = io.read_samples_csv(out / "posterior_samples.csv")
    assert samples.shape == (7, 11, 1)


def test_oracle_rejects_nonlinear_model(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", model="toy", model_options={},
                       simulation={"true_params": {"omega": 2.0, "lambda": 1.0, "v": 0.25},
                                   "obs_times": OBS})
    cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "s")])
    code = cli.main(["oracle", "--config", str(cfg), "--data", str(tmp_path / "s" / "data.csv"),
                     "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "row 0 (x)" in capsys.readouterr().err


def test_criticize(simulated, tmp_path, capsys):
    cfg, sim = simulated
    for name in ("a", "b"):
        raw = json.loads(cfg.read_text())
        raw["output"]["posterior_samples"] = 30
        raw["seed"] = 0 if name == "a" else 1
        cfg.write_text(json.dumps(raw))
        cli.main(["oracle", "--config", str(cfg), "--data", str(sim / "data.csv"), "--out-dir", str(tmp_path / name)])
    capsys.readouterr()
    code = cli.main(["criticize", "--a", str(tmp_path / "a" / "posterior_samples.csv"),
                     "--b", str(tmp_path / "b" / "posterior_samples.csv"), "--permutations", "50",
                     "--out", str(tmp_path / "v.json")])
    assert code == 0
    verdict = json.loads(capsys.readouterr().out)
    assert set(verdict) == {"mmd2", "threshold", "reject", "bandwidth"}
    assert json.loads((tmp_path / "v.json").read_text()) == verdict


# -- exit codes ---------------------------------------------------------------


def test_missing_config_is_config_error(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) == 2


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", optimizer={"epochs": 5, "learning_rate": 1.0})
    assert cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_data_is_data_error_with_line(simulated, tmp_path, capsys):
    cfg, _ = simulated
    bad = tmp_path / "bad.csv"
    bad.write_text("t,f,mask_f\n0.4,1.0,1\n1.0,oops,1\n")
    code = cli.main(["fit", "--config", str(cfg), "--data", str(bad), "--out-dir", str(tmp_path / "o")])
    assert code == 3
    assert "bad.csv:3" in capsys.readouterr().err


def test_numerical_failure_exit_code(simulated, tmp_path, monkeypatch):
    cfg, sim = simulated

    def explode(*a, **k):
        raise NumericalError("all samples non-finite")

    monkeypatch.setattr(cli, "train", explode)
    assert cli.main(["fit", "--config", str(cfg), "--data", str(sim / "data.csv"), "--out-dir", str(tmp_path / "o")]) == 4


def test_thread_limit_validated(simulated, tmp_path, monkeypatch):
    cfg, _ = simulated
    monkeypatch.setenv("LFM_THREADS", "zero")
    assert cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 2
    monkeypatch.setenv("LFM_THREADS", "2")
    assert cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 0


def test_stream_seeds_are_distinct():
    seeds = {cli.stream_seed(0, n) for n in cli.STREAMS}
    assert len(seeds) == len(cli.STREAMS)
    assert cli.stream_seed(1, "fit") != cli.stream_seed(0, "fit")


# -- config -------------------------------------------------------------------


def test_lengthscale_converted_to_rate():
    base = {"model": "matern-gp", "model_options": {"gp_order": 2}}
    cfg = from_dict({**base, "params": {"fixed": {"lengthscale": 2.0}}})
    assert cfg.params.fixed == {"lambda": pytest.approx(np.sqrt(2) / 2)}
    cfg = from_dict({**base, "params": {"fixed": {"lengthscale": 2.0}, "lengthscale_convention": "standard"}})
    assert cfg.params.fixed["lambda"] == pytest.approx(np.sqrt(3) / 2)
    with pytest.raises(ConfigError):
        from_dict({**base, "params": {"fixed": {"lengthscale": 2.0, "lambda": 1.0}}})
    with pytest.raises(ConfigError):
        from_dict({**base, "params": {"fixed": {"lengthscale": -1.0}}})


def test_config_validation():
    with pytest.raises(ConfigError):
        from_dict({"model": "nope"})
    with pytest.raises(ConfigError):
        from_dict({"model": "toy", "params": {"fixed": {"alpha0": 1.0}}})
    with pytest.raises(ConfigError, match="obs_times"):
        from_dict({"model": "matern-gp", "mesh": MESH,
                   "simulation": {"true_params": {"lambda": 1.0, "v": 1.0}, "obs_times": [0.33]}})
    with pytest.raises(ConfigError):
        from_dict({"model": "matern-gp", "ut": {"diffusion_scaling": "half"}})
    with pytest.raises(ConfigError):
        from_dict({"model": "matern-gp", "seed": -1})


def test_data_path_resolved_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.json"
    p.write_text(json.dumps({"model": "matern-gp", "data": "d.csv"}))
    assert load_config(p).data == str((tmp_path / "sub" / "d.csv").resolve())


# -- CSV schemas --------------------------------------------------------------


def test_data_csv_roundtrip_with_missing_values(tmp_path):
    data = Observations([0.0, 0.5], [[1.25, 0.0], [-3.0, 2.0]], [[1, 0], [1, 1]])
    io.write_data_csv(tmp_path / "d.csv", data, ["a", "b"])
    back = io.read_data_csv(tmp_path / "d.csv", ["a", "b"])
    np.testing.assert_array_equal(back.times, data.times)
    np.testing.assert_array_equal(back.mask, data.mask)
    np.testing.assert_array_equal(back.y * back.mask, data.y * data.mask)


@pytest.mark.parametrize("text,line", [
    ("t,x\n0,1\n", 1),
    ("t,f,mask_f\n0,1\n", 2),
    ("t,f,mask_f\n0,1,1\n0,2,1\n", 3),
    ("t,f,mask_f\n0,1,2\n", 2),
    ("t,f,mask_f\n0,inf,1\n", 2),
])
def test_data_csv_errors_name_the_line(tmp_path, text, line):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=f"d.csv:{line}"):
        io.read_data_csv(p, ["f"])


def test_samples_roundtrip_and_dim_selection(tmp_path):
    mesh = np.linspace(0, 1, 4)
    s = np.random.default_rng(0).normal(size=(3, 4, 2))
    io.write_samples_csv(tmp_path / "s.csv", mesh, s, dims=[1])
    t, dims, vals = io.read_samples_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(t, mesh)
    assert dims == [1]
    np.testing.assert_array_equal(vals[:, :, 0], s[:, :, 1])


def test_samples_incomplete_grid_rejected(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("sample_id,t,dim,value\n0,0.0,0,1.0\n0,0.5,0,1.0\n1,0.0,0,2.0\n")
    with pytest.raises(DataError, match="incomplete grid"):
        io.read_samples_csv(p)
    p.write_text("sample_id,t,dim,value\n0,0.0,0,1.0\n0,0.0,0,1.0\n")
    with pytest.raises(DataError, match="s.csv:3"):
        io.read_samples_csv(p)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError, match="not found"):
        io.read_samples_csv(tmp_path / "none.csv")
