import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from mlfm.gp import KernelHyp, TimeGrid
from mlfm.model import BasisSet, ModelSpec, coefficient_at, preset_basis
from mlfm.simulate import (DensePath, observe, read_observations_csv, refine_grid,
                           sample_force_path, simulate_fundamental, simulate_state,
                           write_trajectory_csv)


def kubo_spec():
    return ModelSpec(preset_basis("so2"), [[0.0], [1.0]], [KernelHyp(1.0, 1.0)])


def so3_spec(beta=None, seed=0):
    if beta is None:
        beta = np.random.default_rng(seed).standard_normal((2, 3))
    return ModelSpec(preset_basis("so3"), beta, [KernelHyp(1.0, 1.0)])


def test_zero_coefficient_keeps_state():
    spec = so3_spec(np.zeros((2, 3)))
    path = DensePath.constant([3.0], 0, 2)
    grid = TimeGrid.uniform(0, 2, 0.25)
    X = simulate_state(spec, path, [1.0, -2.0, 0.5], grid)
    np.testing.assert_array_equal(X, np.tile([1.0, -2.0, 0.5], (len(grid), 1)))
    F = simulate_fundamental(spec, path, grid)
    np.testing.assert_array_equal(F, np.broadcast_to(np.eye(3), F.shape))


def kubo_error(step, omega=1.3):
    grid = TimeGrid.uniform(0, 6, 0.5)
    X = simulate_state(kubo_spec(), DensePath.constant([omega], 0, 6), [1.0, 0.0], grid, step=step)
    t = grid.times
    return np.max(np.abs(X - np.column_stack([np.cos(omega * t), -np.sin(omega * t)])))


def test_kubo_constant_force_closed_form():
    assert kubo_error(1e-3) < 1e-11
    # fourth-order convergence: halving h divides the error by about 16
    ratio = kubo_error(0.1) / kubo_error(0.05)
    assert 12 <= ratio <= 20


def test_so3_constant_force_matches_expm():
    spec = so3_spec(seed=1)
    g = 0.8
    A = coefficient_at(spec, [g])
    grid = TimeGrid.uniform(0, 6, 0.5)
    x0 = np.array([0.3, -1.0, 0.4])
    X = simulate_state(spec, DensePath.constant([g], 0, 6), x0, grid, step=1e-3)
    ref = np.array([scipy.linalg.expm(t * A) @ x0 for t in grid.times])
    assert np.max(np.abs(X - ref)) < 1e-8


def test_fundamental_solution_stays_in_so3():
    spec = so3_spec(seed=2)
    path = sample_force_path(spec, 0, 6, 0.01, 5)
    F = simulate_fundamental(spec, path, TimeGrid.uniform(0, 6, 0.5), step=1e-3)
    np.testing.assert_array_equal(F[0], np.eye(3))
    for X in F:
        assert np.linalg.norm(X.T @ X - np.eye(3)) <= 1e-6
        assert abs(np.linalg.det(X) - 1) <= 1e-6


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_linearity_and_norm_preservation(seed, a):
    spec = so3_spec(seed=seed % 97)
    path = sample_force_path(spec, 0, 6, 0.05, seed)
    grid = TimeGrid.uniform(0, 6, 0.5)
    x0 = np.random.default_rng(seed).standard_normal(3)
    X = simulate_state(spec, path, x0, grid, step=1e-2)
    Xa = simulate_state(spec, path, a * x0, grid, step=1e-2)
    np.testing.assert_allclose(Xa, a * X, atol=1e-10 * (1 + abs(a)) * np.linalg.norm(x0))
    norms = np.linalg.norm(X, axis=1)
    assert np.max(np.abs(norms - norms[0])) <= 1e-6 * norms[0]


def test_kubo_norm_preserved_under_random_force():
    spec = kubo_spec()
    path = sample_force_path(spec, 0, 6, 0.01, 3)
    X = simulate_state(spec, path, [0.6, 0.8], TimeGrid.uniform(0, 6, 0.5), step=1e-3)
    assert np.max(np.abs(np.linalg.norm(X, axis=1) - 1)) <= 1e-6


def test_simulate_errors():
    spec = kubo_spec()
    with pytest.raises(ValueError):
        simulate_state(spec, DensePath.constant([1.0], 0, 2), [1.0, 0.0], TimeGrid.uniform(0, 3, 1))
    with pytest.raises(ValueError):
        simulate_state(spec, DensePath.constant([1.0], 0, 2), [1.0], TimeGrid.uniform(0, 2, 1))
    grow = ModelSpec(BasisSet(np.eye(2)), [[400.0], [0.0]], [KernelHyp(1, 1)])
    with pytest.raises(FloatingPointError):
        simulate_state(grow, DensePath.constant([0.0], 0, 6), [1.0, 1.0], TimeGrid.uniform(0, 6, 1))


def test_refine_grid_contains_outputs():
    grid = TimeGrid([0.0, 0.3, 1.0, 1.05])
    fine, idx = refine_grid(grid, 0.1)
    np.testing.assert_allclose(fine[idx], grid.times, rtol=0, atol=1e-15)
    assert np.all(np.diff(fine) <= 0.1 + 1e-12)


def test_observe_examples():
    states = np.random.default_rng(0).standard_normal((13, 2))
    np.testing.assert_array_equal(observe(states, 0.0, 1).values, states)
    np.testing.assert_array_equal(observe(states, 0.1, 7).values, observe(states, 0.1, 7).values)
    with pytest.raises(ValueError):
        observe(states, -1.0, 0)


def test_observe_noise_variance_monte_carlo():
    states = np.zeros((5, 2))
    noise = np.concatenate([observe(states, 0.05, s).values.ravel() for s in range(10_000)])
    assert abs(noise.var() / 0.05**2 - 1) < 0.02


def test_sample_force_path_reproducible():
    spec = kubo_spec()
    a = sample_force_path(spec, 0, 6, 0.01, 42)
    b = sample_force_path(spec, 0, 6, 0.01, 42)
    np.testing.assert_array_equal(a.forces, b.forces)
    assert a.forces.shape == (1, 601)
    np.testing.assert_allclose(a.at([0.005]), 0.5 * (a.forces[:, :1] + a.forces[:, 1:2]))


def test_trajectory_csv_roundtrip(tmp_path):
    t = np.array([0.0, 0.5, 1.0])
    X = np.array([[1.0, 0.0], [np.pi, 1 / 3], [-1e-300, 2.0]])
    g = np.array([[0.1, 0.2, 0.30000000000000004]])
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, t, X, g)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,g_1"
    obs = read_observations_csv(path, noise_sd=0.1)
    np.testing.assert_array_equal(obs.values, X)
    np.testing.assert_array_equal(obs.times, t)
    assert obs.noise_sd == 0.1
    assert "0.30000000000000004" in lines[3]
