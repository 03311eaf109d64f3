import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mlfm import __version__
from mlfm.cli import main

KUBO = """
[model]
basis = "so2"
n_forces = 1
beta = [[0.0], [1.0]]
force_kernels = [{amplitude_sq = 1.0, lengthscale = 1.0}]

[simulate]
horizon = [0.0, 4.0]
dt = 0.5
noise_sd = 0.01
x0 = [1.0, 0.0]

[ag]
update_beta = false

[mixsa]
order = 4
n_anchors = 2
refine = 2
update_beta = false
max_iter = 20
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "kubo.toml").write_text(KUBO)
    return tmp_path


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_writes_truth_and_observations(workdir, capsys):
    main(["simulate", "--config", str(workdir / "kubo.toml"), "--seed", "3",
          "--out", str(workdir / "sim")])
    truth = read_csv(workdir / "sim" / "truth.csv")
    obs = read_csv(workdir / "sim" / "observations.csv")
    assert truth[0] == ["t", "x_1", "x_2", "g_1"]
    assert obs[0] == ["t", "x_1", "x_2"]
    assert len(obs) == 1 + 9
    X = np.array(truth[1:], dtype=float)[:, 1:3]
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-6)
    assert "wrote" in capsys.readouterr().out
    # same seed, same files
    main(["simulate", "--config", str(workdir / "kubo.toml"), "--seed", "3",
          "--out", str(workdir / "again")])
    assert ((workdir / "sim" / "observations.csv").read_bytes()
            == (workdir / "again" / "observations.csv").read_bytes())


def test_simulate_identity_start_stacks_columns(workdir):
    (workdir / "so3.toml").write_text(
        '[model]\nbasis = "so3"\nn_forces = 1\nbeta = [[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]]\n'
        'force_kernels = [{amplitude_sq = 0.25, lengthscale = 2.0}]\n'
        '[simulate]\ndt = 1.0\n')
    main(["simulate", "--config", str(workdir / "so3.toml"), "--out", str(workdir / "so3")])
    rows = read_csv(workdir / "so3" / "truth.csv")
    assert rows[0][:2] == ["t", "x_1"] and rows[0][9] == "x_9"
    np.testing.assert_array_equal(np.array(rows[1][1:10], dtype=float), np.eye(3).ravel())


@pytest.fixture
def simulated(workdir):
    main(["simulate", "--config", str(workdir / "kubo.toml"), "--seed", "1",
          "--out", str(workdir)])
    return workdir


def test_fit_ag_json(simulated):
    main(["fit-ag", "--config", str(simulated / "kubo.toml"), "--data",
          str(simulated / "observations.csv"), "--out", str(simulated), "--seed", "2"])
    res = json.loads((simulated / "fit_ag.json").read_text())
    assert res["method"] == "ag" and res["version"] == __version__ and res["seed"] == 2
    assert np.array(res["g"]).shape == (1, 9)
    assert np.array(res["X"]).shape == (9, 2)
    assert res["config"]["noise_sd"] == 0.01
    assert np.all(np.diff(res["trace"]) >= -1e-8)
    truth = np.array(read_csv(simulated / "truth.csv")[1:], dtype=float)[:, 3]
    assert np.linalg.norm(np.array(res["g"][0]) - truth) < 1.0


def test_fit_mixsa_json(simulated):
    main(["fit-mixsa", "--config", str(simulated / "kubo.toml"), "--data",
          str(simulated / "observations.csv"), "--out", str(simulated), "--noise-sd", "0.02"])
    res = json.loads((simulated / "fit_mixsa.json").read_text())
    for key in ("g", "beta", "mu", "pi", "alpha", "responsibilities", "trace", "config"):
        assert key in res
    assert np.array(res["g"]).shape == (1, 17)
    assert np.array(res["g_obs"]).shape == (1, 9)
    assert np.array(res["responsibilities"]).shape == (9, 2)
    assert sum(res["pi"]) == pytest.approx(1.0)
    assert res["config"]["mixsa"]["alpha_max"] == pytest.approx(1 / 0.02**2)
    assert res["config"]["mixsa"]["anchors"] == [2, 6]


def test_experiment_subcommand(tmp_path, capsys):
    (tmp_path / "e.toml").write_text(
        '[experiment]\nn_anchors = [2]\nmixsa = {max_iter = 10}\n')
    main(["experiment", "kubo", "--config", str(tmp_path / "e.toml"), "--reps", "1",
          "--dt", "1.0", "--out", str(tmp_path / "run")])
    out = capsys.readouterr().out
    assert "mixsa D=2;M=5" in out
    summary = read_csv(tmp_path / "run" / "summary.csv")
    assert summary[0][:6] == ["method", "setting", "dt", "mean_error", "sd_error", "n_ok"]
    meta = json.loads((tmp_path / "run" / "meta.json").read_text())
    assert meta["config"]["n_reps"] == 1 and meta["seed"] == 0


def test_entry_point_and_bad_arguments():
    done = subprocess.run([sys.executable, "-m", "mlfm.cli", "--version"], capture_output=True,
                          text=True)
    assert done.returncode == 0 and __version__ in done.stdout
    with pytest.raises(SystemExit):
        main(["experiment", "mocap"])
    with pytest.raises(SystemExit):
        main(["fit-ag"])
