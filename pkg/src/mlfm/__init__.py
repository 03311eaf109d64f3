"""Multiplicative latent force models with approximate inference."""

__version__ = "0.1.0"

from .gp import GaussianDist, KernelHyp, TimeGrid
from .model import BasisSet, ModelSpec, coefficient_at, preset_basis, structure_matrices
from .simulate import DensePath, Observations, observe, simulate_fundamental, simulate_state
from .ag import AGConfig, AGState, GradientMatching, ag_gibbs, ag_map, linear_reps
from .mixsa import MixSAConfig, SuccessiveApproximations, mixsa_em, picard_mean, trapz_weights
from .experiments import ErrorRecord, ExperimentConfig, reconstruction_error, run_kubo, run_so3
