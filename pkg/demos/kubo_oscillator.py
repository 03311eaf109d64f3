"""Random harmonic oscillator: recover a latent frequency from noisy positions.

A point moves on the unit circle with angular velocity g(t), a draw from an
RBF Gaussian process.  We observe its position every half time unit, then
estimate g with adaptive gradient matching (AG) and with a two-anchor mixture
of successive approximations (MixSA), and compare both to the truth.

    python demos/kubo_oscillator.py
"""

import numpy as np

from mlfm import (AGConfig, KernelHyp, MixSAConfig, ModelSpec, TimeGrid, ag_map, mixsa_em,
                  observe, preset_basis, simulate_state)
from mlfm.gp import fit_hyperparams
from mlfm.mixsa import equally_spaced_anchors
from mlfm.simulate import sample_force_path

NOISE_SD = 0.01

# A(t) = g(t) L with L the so(2) generator; beta is known here, only g is unknown.
spec = ModelSpec(preset_basis("so2"), [[0.0], [1.0]], [KernelHyp(1.0, 1.0)])
grid = TimeGrid.uniform(0.0, 6.0, 0.5)

path = sample_force_path(spec, 0.0, 6.0, 0.01, 7)
X = simulate_state(spec, path, [1.0, 0.0], grid)
obs = observe(X, NOISE_SD, 8, grid)
g_true = path.at(grid.times)[0]
print(f"{len(grid)} observations, state radius drift {np.ptp(np.linalg.norm(X, axis=1)):.1e}")

# Gradient matching needs a GP per state dimension; fit its hyperparameters first.
hyps = [fit_hyperparams(grid, obs.values[:, k], NOISE_SD**2).hyp for k in range(2)]
ag = ag_map(obs, spec, AGConfig(hyps, NOISE_SD**2, update_beta=False))
print(f"AG     {ag.n_iter:4d} sweeps  error {np.linalg.norm(ag.state.g[0] - g_true):.3f}")

# MixSA: order-5 Picard approximations around two anchors, forces on a 5x finer grid.
cfg = MixSAConfig(order=5, anchors=equally_spaced_anchors(grid, 2), refine=5,
                  alpha_max=1 / NOISE_SD**2, update_beta=False)
mix = mixsa_em(obs, spec, cfg)
print(f"MixSA  {mix.n_iter:4d} cycles  error {np.linalg.norm(mix.g_obs[0] - g_true):.3f}")

print("\n   t    true      AG   MixSA  resp(anchor 1)")
for n, t in enumerate(grid.times):
    print(f"{t:4.1f} {g_true[n]:7.3f} {ag.state.g[0, n]:7.3f} {mix.g_obs[0, n]:7.3f}"
          f"  {mix.responsibilities[n, 0]:10.2f}")
