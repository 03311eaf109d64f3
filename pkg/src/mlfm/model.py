"""Multiplicative latent force model definition.

The coefficient matrix of the linear ODE ẋ = A(t) x is

    A(t) = A_0 + Σ_r g_r(t) A_r,    A_r = Σ_d β_rd L_d,

so the basis matrices L_d fix the support of A(t) and the (R+1)×D matrix
``beta`` mixes them.  Row 0 of ``beta`` is the constant offset (g_0 ≡ 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import KernelHyp

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "BasisSet",
    "ModelSpec",
    "preset_basis",
    "stack_basis",
    "structure_matrices",
    "coefficient_at",
    "coefficient_path",
    "load_model_spec",
    "model_spec_from_dict",
    "model_spec_to_dict",
]


class BasisSet:
    """D linearly independent K×K basis matrices."""

    def __init__(self, matrices, name=None):
        L = np.array(matrices, dtype=float)
        if L.ndim == 2:
            L = L[None]
        if L.ndim != 3 or L.shape[1] != L.shape[2]:
            raise ValueError(f"basis must be a stack of square matrices, got shape {L.shape}")
        if not np.all(np.isfinite(L)):
            raise ValueError("basis matrices must be finite")
        flat = L.reshape(L.shape[0], -1)
        if np.linalg.matrix_rank(flat) < L.shape[0]:
            raise ValueError("basis matrices are linearly dependent")
        L.setflags(write=False)
        self.matrices = L
        self.name = name

    @property
    def n_basis(self) -> int:
        return self.matrices.shape[0]

    @property
    def dim_state(self) -> int:
        return self.matrices.shape[1]

    def __len__(self):
        return self.n_basis

    def __repr__(self):
        label = self.name or "custom"
        return f"BasisSet({label}, D={self.n_basis}, K={self.dim_state})"


_SO2 = np.array([[[0.0, 1.0], [-1.0, 0.0]]])

_SO3 = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
])


def preset_basis(name: str) -> BasisSet:
    """Lie-algebra bases: ``"so2"`` (Kubo oscillator, real form) or ``"so3"``.

    The so(3) generators satisfy [L_1, L_2] = L_3 and cyclic permutations.
    """
    key = name.lower()
    if key == "so2":
        return BasisSet(_SO2, name="so2")
    if key == "so3":
        return BasisSet(_SO3, name="so3")
    raise ValueError(f"unknown basis preset {name!r}; expected 'so2' or 'so3'")


def stack_basis(basis: BasisSet, copies: int) -> BasisSet:
    """Block-diagonal basis I_copies ⊗ L_d.

    Evolves ``copies`` state vectors under one shared A(t); used for the
    fundamental solution, whose columns are stacked into one long state.
    """
    eye = np.eye(copies)
    mats = np.stack([np.kron(eye, L) for L in basis.matrices])
    name = f"{basis.name}x{copies}" if basis.name else None
    return BasisSet(mats, name=name)


@dataclass
class ModelSpec:
    basis: BasisSet
    beta: np.ndarray
    force_kernels: list = field(default_factory=list)
    beta_prior_var: float = 1.0

    def __post_init__(self):
        self.beta = np.array(self.beta, dtype=float)
        if self.beta.ndim != 2:
            raise ValueError("beta must be a (R+1) x D matrix")
        if self.beta.shape[1] != self.basis.n_basis:
            raise ValueError(
                f"beta has {self.beta.shape[1]} columns but basis has {self.basis.n_basis} matrices")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")
        if len(self.force_kernels) != self.n_forces:
            raise ValueError(
                f"{len(self.force_kernels)} force kernels given for {self.n_forces} forces")
        if not self.beta_prior_var > 0:
            raise ValueError("beta_prior_var must be positive")

    @property
    def n_forces(self) -> int:
        return self.beta.shape[0] - 1

    @property
    def dim_state(self) -> int:
        return self.basis.dim_state

    @property
    def n_basis(self) -> int:
        return self.basis.n_basis

    def with_beta(self, beta) -> "ModelSpec":
        return ModelSpec(self.basis, beta, list(self.force_kernels), self.beta_prior_var)


def _beta_of(spec_or_beta):
    return spec_or_beta.beta if isinstance(spec_or_beta, ModelSpec) else np.asarray(spec_or_beta)


def structure_matrices(spec: ModelSpec, beta=None) -> np.ndarray:
    """Return the (R+1)×K×K stack A_r = Σ_d β_rd L_d."""
    beta = spec.beta if beta is None else np.asarray(beta, dtype=float)
    return np.einsum("rd,dij->rij", beta, spec.basis.matrices)


def coefficient_at(spec: ModelSpec, g_at_t, beta=None) -> np.ndarray:
    """A(t) = A_0 + Σ_r g_r A_r for a single vector of force values."""
    g = np.atleast_1d(np.asarray(g_at_t, dtype=float))
    A = structure_matrices(spec, beta)
    if g.shape != (A.shape[0] - 1,):
        raise ValueError(f"expected {A.shape[0] - 1} force values, got shape {g.shape}")
    return A[0] + np.tensordot(g, A[1:], axes=1)


def coefficient_path(basis: BasisSet, beta, g) -> np.ndarray:
    """A(t_n) for every column of the R×N force matrix ``g``; shape N×K×K."""
    coef = mixing_weights(beta, g)
    return np.einsum("nd,dij->nij", coef, basis.matrices)


def mixing_weights(beta, g) -> np.ndarray:
    """c_nd = β_0d + Σ_r g_rn β_rd; shape N×D."""
    beta = np.asarray(beta, dtype=float)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    return beta[0][None, :] + g.T @ beta[1:]


# ---------------------------------------------------------------------------
# model specification files
# ---------------------------------------------------------------------------

def model_spec_from_dict(cfg: dict) -> ModelSpec:
    basis_cfg = cfg["basis"]
    if isinstance(basis_cfg, str):
        basis = preset_basis(basis_cfg)
    else:
        basis = BasisSet(basis_cfg)
    copies = int(cfg.get("stack", 1))
    if copies > 1:
        basis = stack_basis(basis, copies)
    n_forces = int(cfg["n_forces"])
    if cfg.get("beta") is not None:
        beta = np.array(cfg["beta"], dtype=float)
    else:
        beta = np.zeros((n_forces + 1, basis.n_basis))
    kernels = [KernelHyp(float(k["amplitude_sq"]), float(k["lengthscale"]))
               for k in cfg.get("force_kernels", [])]
    if not kernels:
        kernels = [KernelHyp(1.0, 1.0) for _ in range(n_forces)]
    spec = ModelSpec(basis, beta, kernels, float(cfg.get("beta_prior_var", 1.0)))
    if spec.n_forces != n_forces:
        raise ValueError(f"beta has {spec.n_forces} force rows but n_forces = {n_forces}")
    return spec


def model_spec_to_dict(spec: ModelSpec) -> dict:
    basis = spec.basis.name if spec.basis.name in ("so2", "so3") else spec.basis.matrices.tolist()
    return {
        "basis": basis,
        "n_forces": spec.n_forces,
        "beta": spec.beta.tolist(),
        "force_kernels": [{"amplitude_sq": k.amplitude_sq, "lengthscale": k.lengthscale}
                          for k in spec.force_kernels],
        "beta_prior_var": spec.beta_prior_var,
    }


def read_config(path) -> dict:
    """Load a JSON or TOML document into a dict, chosen by file suffix."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def load_model_spec(path) -> ModelSpec:
    cfg = read_config(path)
    return model_spec_from_dict(cfg.get("model", cfg))
