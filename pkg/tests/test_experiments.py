import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mlfm import __version__
from mlfm.experiments import (ErrorRecord, ExperimentConfig, experiment_config_from_dict,
                              kubo_rep, load_experiment_config, reconstruction_error, rep_seeds,
                              resolve_fundamental, run_experiment, run_kubo, run_so3,
                              sample_sphere, summarise, write_results)
from mlfm.model import ModelSpec, preset_basis
from mlfm.simulate import sample_force_path, simulate_fundamental


def small_kubo(**kw):
    base = dict(n_reps=2, n_anchors=(2,), dt=1.0, mixsa={"max_iter": 20})
    base.update(kw)
    return ExperimentConfig("kubo", **base)


# -- metric -----------------------------------------------------------------------

def test_reconstruction_error_examples():
    X = np.random.default_rng(0).standard_normal((4, 3))
    assert reconstruction_error(X, X) == 0.0
    assert reconstruction_error(np.ones((4, 3)), np.zeros((4, 3))) == pytest.approx(math.sqrt(12),
                                                                                    rel=1e-15)
    Y = np.random.default_rng(1).standard_normal((4, 3))
    ref = math.sqrt(sum((a - b) ** 2 for a, b in zip(X.ravel(), Y.ravel())))
    assert reconstruction_error(X, Y) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        reconstruction_error(X, Y[:3])


@given(arrays(float, (5, 3), elements=st.floats(-1e3, 1e3)),
       arrays(float, (5, 3), elements=st.floats(-1e3, 1e3)))
def test_reconstruction_error_symmetric(a, b):
    assert reconstruction_error(a, b) == reconstruction_error(b, a)


def test_sample_sphere_monte_carlo():
    x = sample_sphere(np.random.default_rng(0), 10_000)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, rtol=1e-14)
    assert np.linalg.norm(x.mean(axis=0)) < 0.05


# -- config and records -------------------------------------------------------------

def test_experiment_config_validation_and_defaults():
    cfg = ExperimentConfig("kubo")
    assert cfg.orders == (5,) and cfg.n_anchors == (1, 2, 3)
    assert ExperimentConfig("so3").orders == (3, 5, 7)
    assert cfg.noise_var == pytest.approx(1e-4)
    for bad in (dict(experiment="mocap"), dict(experiment="kubo", dt=0.0),
                dict(experiment="kubo", n_reps=0), dict(experiment="kubo", horizon=(6, 0))):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_experiment_config_from_files(tmp_path):
    (tmp_path / "e.toml").write_text(
        '[experiment]\nexperiment = "so3"\ndt = [0.5, 1.0]\nn_reps = 3\nnoise_sd = 0.02\n')
    cfg = load_experiment_config(tmp_path / "e.toml", n_reps=None, base_seed=7)
    assert cfg.dts == (0.5, 1.0) and cfg.n_reps == 3 and cfg.base_seed == 7
    (tmp_path / "e.json").write_text(json.dumps(cfg.to_dict()))
    again = load_experiment_config(tmp_path / "e.json")
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises((ValueError, TypeError)):
        experiment_config_from_dict({"experiment": "kubo", "unknown_key": 1})


def test_error_record_validation():
    with pytest.raises(ValueError):
        ErrorRecord(0, "ag", "", 0.5, -1.0)
    with pytest.raises(ValueError):
        ErrorRecord(0, "ag", "", 0.5, float("nan"))
    assert math.isnan(ErrorRecord(0, "ag", "", 0.5, float("nan"), "failed").error)


def test_rep_seeds_distinct_and_stable():
    cfg = ExperimentConfig("kubo")
    a = [s.generate_state(2).tolist() for s in rep_seeds(cfg, 0)]
    b = [s.generate_state(2).tolist() for s in rep_seeds(cfg, 0)]
    c = [s.generate_state(2).tolist() for s in rep_seeds(cfg, 1)]
    assert a == b and a != c and len({tuple(x) for x in a}) == 3


def test_runners_check_experiment_type():
    with pytest.raises(ValueError):
        run_so3(ExperimentConfig("kubo"))
    with pytest.raises(ValueError):
        run_kubo(ExperimentConfig("so3"))


# -- runs -----------------------------------------------------------------------------

def test_zero_truth_noiseless_ag_error_small():
    cfg = small_kubo(noise_sd=0.0, force_kernel=(1e-12, 1.0), dt=0.5, n_anchors=())
    rec = [r for r in kubo_rep(cfg, 0) if r.method == "ag"][0]
    assert rec.status != "failed"
    assert rec.error < 0.1


def test_oracle_injection_reconstruction():
    cfg = ExperimentConfig("so3", dt=0.5)
    beta = sample_sphere(np.random.default_rng(3), 2)
    base = ModelSpec(preset_basis("so3"), beta, [cfg.kernel])
    step = cfg.dt / cfg.path_substeps
    path = sample_force_path(base, *cfg.horizon, step, 11)
    F = simulate_fundamental(base, path, cfg.grid)
    X = resolve_fundamental(base, beta, path.fine_grid.times, path.forces, cfg.grid, step=step)
    assert reconstruction_error(F, X) < 1e-6


@pytest.fixture(scope="module")
def kubo_outputs(tmp_path_factory):
    cfg = small_kubo()
    out = tmp_path_factory.mktemp("kubo")
    records = run_kubo(cfg)
    write_results(records, out / "a", cfg, wall_time=1.0)
    write_results(run_kubo(cfg), out / "b", cfg, wall_time=1.0)
    return cfg, records, out


def test_run_is_byte_identical(kubo_outputs):
    _, _, out = kubo_outputs
    for name in ("errors.csv", "summary.csv"):
        assert (out / "a" / name).read_bytes() == (out / "b" / name).read_bytes()


def test_outputs_layout_and_summary_recomputable(kubo_outputs):
    cfg, records, out = kubo_outputs
    with open(out / "a" / "errors.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["rep", "method", "setting", "dt", "error", "status"]
    assert len(rows) == len(records) == 2 * 2
    assert {r["method"] for r in rows} == {"ag", "mixsa"}
    with open(out / "a" / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    for s in summary:
        errs = [float(r["error"]) for r in rows if r["method"] == s["method"]
                and r["setting"] == s["setting"] and r["status"] != "failed"]
        assert float(s["mean_error"]) == pytest.approx(np.mean(errs), rel=1e-15)
        assert int(s["n_ok"]) == len(errs)
    meta = json.loads((out / "a" / "meta.json").read_text())
    assert meta["version"] == __version__ and meta["wall_time_s"] == 1.0
    assert meta["config"]["noise_sd"] == cfg.noise_sd
    assert summarise(records)[0]["n_failed"] == 0


def test_parallel_matches_serial(kubo_outputs):
    cfg, records, _ = kubo_outputs
    cfg.n_jobs = 2
    try:
        assert run_kubo(cfg) == records
    finally:
        cfg.n_jobs = 1


def test_summary_counts_failures():
    recs = [ErrorRecord(0, "ag", "", 0.5, 1.0), ErrorRecord(1, "ag", "", 0.5, 3.0, "nonconverged"),
            ErrorRecord(2, "ag", "", 0.5, float("nan"), "failed")]
    row = summarise(recs)[0]
    assert row["mean_error"] == 2.0 and row["n_ok"] == 2
    assert row["n_failed"] == 1 and row["n_nonconverged"] == 1


def test_run_experiment_loops_over_spacings():
    cfg = ExperimentConfig("kubo", n_reps=1, n_anchors=(), dts=(0.5, 1.0))
    records = run_experiment(cfg)
    assert [r.dt for r in records] == [0.5, 1.0]
