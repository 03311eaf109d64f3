"""Ground-truth trajectories, fundamental solutions and noisy observations.

Forces are supplied as a dense sampled path and interpolated linearly; the
ODE is integrated with classical fixed-step RK4 on a grid that contains the
requested output times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import TimeGrid, gp_sample
from .model import ModelSpec, coefficient_path

__all__ = [
    "DensePath",
    "Observations",
    "refine_grid",
    "sample_force_path",
    "simulate_state",
    "simulate_fundamental",
    "observe",
    "write_trajectory_csv",
    "read_observations_csv",
]


@dataclass
class DensePath:
    """Force values g_r on a fine time grid; R×N_fine."""

    fine_grid: TimeGrid
    forces: np.ndarray

    def __post_init__(self):
        self.forces = np.atleast_2d(np.asarray(self.forces, dtype=float))
        if self.forces.shape[1] != len(self.fine_grid):
            raise ValueError("forces must have one column per fine grid point")

    @classmethod
    def constant(cls, values, start, stop):
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(TimeGrid([start, stop]), np.repeat(values[:, None], 2, axis=1))

    def at(self, t) -> np.ndarray:
        """Linearly interpolated forces at times ``t``; R×len(t)."""
        t = np.atleast_1d(t)
        return np.stack([np.interp(t, self.fine_grid.times, f) for f in self.forces])

    @property
    def n_forces(self):
        return self.forces.shape[0]


@dataclass
class Observations:
    grid: TimeGrid
    values: np.ndarray
    noise_sd: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != len(self.grid):
            raise ValueError(
                f"values have {self.values.shape[0]} rows for a grid of {len(self.grid)} times")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")

    @property
    def times(self):
        return self.grid.times

    @property
    def dim_state(self):
        return self.values.shape[1]


def refine_grid(out_grid: TimeGrid, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Subdivide every output interval into equal steps no longer than ``step``.

    Returns the fine times and the indices of the output times within them.
    """
    t = out_grid.times
    pieces, idx, pos = [t[:1]], [0], 0
    for a, b in zip(t[:-1], t[1:]):
        n = max(int(np.ceil((b - a) / step - 1e-9)), 1)
        pieces.append(a + (b - a) * np.arange(1, n + 1) / n)
        pos += n
        idx.append(pos)
    return np.concatenate(pieces), np.asarray(idx)


def sample_force_path(spec: ModelSpec, start, stop, step, rng_seed) -> DensePath:
    """Independent GP draws for each force on a uniform fine grid."""
    grid = TimeGrid.uniform(start, stop, step)
    if not isinstance(rng_seed, np.random.SeedSequence):
        rng_seed = np.random.SeedSequence(rng_seed)
    seeds = rng_seed.spawn(spec.n_forces)
    forces = [gp_sample(grid, hyp, s) for hyp, s in zip(spec.force_kernels, seeds)]
    return DensePath(grid, np.array(forces).reshape(spec.n_forces, len(grid)))


def _rk4(spec, path, X0, out_grid, step):
    if step is None:
        step = min(float(np.min(path.fine_grid.spacing)),
                   float(np.min(out_grid.spacing)) / 50.0 if len(out_grid) > 1 else np.inf)
    times, out_idx = refine_grid(out_grid, step)
    if (times[0] < path.fine_grid.times[0] - 1e-12
            or times[-1] > path.fine_grid.times[-1] + 1e-12):
        raise ValueError("output grid extends beyond the force path")
    # A at every node and every midpoint
    half = 0.5 * (times[:-1] + times[1:])
    beta, L = spec.beta, spec.basis
    A_nodes = coefficient_path(L, beta, path.at(times))
    A_half = coefficient_path(L, beta, path.at(half))
    X = np.array(X0, dtype=float)
    out = np.empty((len(out_idx),) + X.shape)
    out[0] = X
    j = 1
    for i in range(len(times) - 1):
        h = times[i + 1] - times[i]
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = A_nodes[i] @ X
            k2 = A_half[i] @ (X + 0.5 * h * k1)
            k3 = A_half[i] @ (X + 0.5 * h * k2)
            k4 = A_nodes[i + 1] @ (X + h * k3)
            X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"state became non-finite at t = {times[i + 1]:g}")
        if j < len(out_idx) and out_idx[j] == i + 1:
            out[j] = X
            j += 1
    return out


def simulate_state(spec: ModelSpec, path: DensePath, x0, out_grid: TimeGrid, step=None):
    """Integrate ẋ = A(t)x from ``x0`` at ``out_grid[0]``; returns N×K states."""
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != spec.dim_state:
        raise ValueError(f"x0 has {x0.size} entries, state dimension is {spec.dim_state}")
    return _rk4(spec, path, x0, out_grid, step)


def simulate_fundamental(spec: ModelSpec, path: DensePath, out_grid: TimeGrid, step=None):
    """Matrix solution with X(t_0) = I; returns an N×K×K array."""
    return _rk4(spec, path, np.eye(spec.dim_state), out_grid, step)


def observe(states, noise_sd: float, rng_seed, grid=None) -> Observations:
    """Add i.i.d. N(0, noise_sd²) noise to every entry of ``states``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    values = states + noise_sd * rng.standard_normal(states.shape)
    if grid is None:
        grid = TimeGrid(np.arange(states.shape[0], dtype=float))
    return Observations(grid, values, noise_sd)


def write_trajectory_csv(path, times, states, forces=None):
    """CSV with header ``t,x_1..x_K[,g_1..g_R]`` at 17 significant digits."""
    times = np.asarray(times, dtype=float)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    cols = [times[:, None], states]
    header = ["t"] + [f"x_{k + 1}" for k in range(states.shape[1])]
    if forces is not None:
        forces = np.atleast_2d(np.asarray(forces, dtype=float))
        cols.append(forces.T)
        header += [f"g_{r + 1}" for r in range(forces.shape[0])]
    np.savetxt(path, np.hstack(cols), delimiter=",", fmt="%.17g",
               header=",".join(header), comments="")


def read_observations_csv(path, noise_sd=0.0) -> Observations:
    """Read a trajectory CSV; only the ``t`` and ``x_*`` columns are used."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    return Observations(TimeGrid(data[:, 0]), data[:, xcols], noise_sd)
