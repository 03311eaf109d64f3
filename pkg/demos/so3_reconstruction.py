"""Rotations driven by one latent force: learn the generator and re-solve.

The fundamental solution X(t) of dX/dt = A(t) X lives in SO(3) when A(t) is
skew-symmetric.  Here A(t) = A_0 + g(t) A_1 with A_0, A_1 spanned by the so(3)
generators through unknown coefficients beta.  Both methods estimate (g, beta)
from noisy entries of X; we then solve the ODE at the estimates and report
how far the reconstruction is from the true rotations.

    python demos/so3_reconstruction.py
"""

import numpy as np

from mlfm import (AGConfig, KernelHyp, MixSAConfig, ModelSpec, TimeGrid, ag_map, mixsa_em,
                  observe, preset_basis, reconstruction_error, simulate_fundamental)
from mlfm.experiments import resolve_fundamental, sample_sphere
from mlfm.gp import fit_hyperparams
from mlfm.mixsa import equally_spaced_anchors
from mlfm.model import stack_basis
from mlfm.simulate import sample_force_path

NOISE_SD = 0.01
kernel = KernelHyp(0.25, 2.0)
rng = np.random.default_rng(3)

beta = sample_sphere(rng, 2)                      # rows uniform on the sphere
base = ModelSpec(preset_basis("so3"), beta, [kernel])
grid = TimeGrid.uniform(0.0, 6.0, 0.5)
path = sample_force_path(base, 0.0, 6.0, 0.01, 4)
F = simulate_fundamental(base, path, grid)
print("max |det X - 1| along the path:", f"{max(abs(np.linalg.det(X) - 1) for X in F):.1e}")

# The nine entries of X evolve as three columns sharing A(t): a 9-dimensional
# state with the block-diagonal basis I_3 (x) L_d.
spec = ModelSpec(stack_basis(base.basis, 3), beta, [kernel])
obs = observe(F.transpose(0, 2, 1).reshape(len(grid), 9), NOISE_SD, 5, grid)

hyps = [fit_hyperparams(grid, obs.values[:, k], NOISE_SD**2).hyp for k in range(9)]
ag = ag_map(obs, spec, AGConfig(hyps, NOISE_SD**2))
X_ag = resolve_fundamental(base, ag.state.beta, grid.times, ag.state.g, grid, kernel=kernel)
print(f"AG          reconstruction error {reconstruction_error(F, X_ag):.3f}")

for order in (3, 5, 7):
    cfg = MixSAConfig(order=order, anchors=equally_spaced_anchors(grid, 2), refine=5,
                      alpha_max=1 / NOISE_SD**2)
    res = mixsa_em(obs, spec, cfg)
    X_mix = resolve_fundamental(base, res.beta, res.latent_times, res.g, grid)
    print(f"MixSA M={order}   reconstruction error {reconstruction_error(F, X_mix):.3f}")
