"""Adaptive gradient matching for the MLFM.

Each state component gets an independent GP interpolant; the gradient it
implies is matched against the ODE gradient f_k through a product of
Gaussian experts, and the gradients are integrated out.  For the linear
MLFM the resulting density is an exponentiated quadratic separately in the
states X, the forces g and the connection coefficients beta, so every
block has a Gaussian conditional.  :class:`GradientMatching` assembles those
conditionals; :func:`ag_map` and :func:`ag_gibbs` drive them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .gp import GaussianDist, KernelHyp, TimeGrid, cov_matrix, gradient_operator
from .model import ModelSpec, structure_matrices
from .simulate import Observations

__all__ = [
    "AGConfig",
    "AGState",
    "AGResult",
    "GradientMatching",
    "linear_reps",
    "ag_log_density",
    "ag_map",
    "ag_gibbs",
]


@dataclass
class AGConfig:
    state_hyp: list
    obs_noise_var: float
    gamma: object = 1e-3
    max_iter: int = 2000
    tol: float = 1e-8
    update_beta: bool = True

    def __post_init__(self):
        g = np.broadcast_to(np.asarray(self.gamma, dtype=float), (len(self.state_hyp),))
        if np.any(g <= 0):
            raise ValueError("gamma must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not self.obs_noise_var > 0:
            raise ValueError("obs_noise_var must be positive (use np.inf for no data)")

    @property
    def gammas(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.gamma, dtype=float), (len(self.state_hyp),)).copy()

    def to_dict(self):
        return {
            "state_hyp": [{"amplitude_sq": h.amplitude_sq, "lengthscale": h.lengthscale}
                          for h in self.state_hyp],
            "obs_noise_var": self.obs_noise_var,
            "gamma": self.gammas.tolist(),
            "max_iter": self.max_iter,
            "tol": self.tol,
            "update_beta": self.update_beta,
        }


@dataclass
class AGState:
    X: np.ndarray      # K×N
    g: np.ndarray      # R×N
    beta: np.ndarray   # (R+1)×D

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.g = np.asarray(self.g, dtype=float).reshape(-1, self.X.shape[1])
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))

    def copy(self):
        return AGState(self.X.copy(), self.g.copy(), self.beta.copy())


def linear_reps(state: AGState, spec: ModelSpec):
    """The three linear representations of the ODE gradient.

    Returns ``(u, v, w)`` with shapes K×K×N, K×(R+1)×N and K×(R+1)×D×N such
    that, with g_0 ≡ 1,

        f_k = Σ_j u_kj ∘ x_j = Σ_r v_kr ∘ g_r = Σ_rd β_rd w_krd.
    """
    A = structure_matrices(spec, state.beta)
    X = state.X
    g_full = np.vstack([np.ones((1, X.shape[1])), state.g])
    u = np.einsum("rkj,rn->kjn", A, g_full)
    v = np.einsum("rkj,jn->krn", A, X)
    Lx = np.einsum("dkj,jn->kdn", spec.basis.matrices, X)
    w = g_full[None, :, None, :] * Lx[:, None, :, :]
    return u, v, w


def _gaussian_from_precision(P, b) -> GaussianDist:
    P = 0.5 * (P + P.T)
    try:
        c = scipy.linalg.cho_factor(P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("conditional precision is not positive definite") from exc
    mean = scipy.linalg.cho_solve(c, b)
    cov = scipy.linalg.cho_solve(c, np.eye(P.shape[0]))
    dist = GaussianDist(mean, 0.5 * (cov + cov.T))
    dist.precision = P
    dist.precision_chol = np.tril(c[0])
    return dist


def _sample_from(dist: GaussianDist, rng) -> np.ndarray:
    # x = m + L^{-T} z has covariance P^{-1} when P = L L^T
    z = rng.standard_normal(dist.mean.size)
    return dist.mean + scipy.linalg.solve_triangular(dist.precision_chol.T, z, lower=False)


def _sym_inv(M):
    c = scipy.linalg.cho_factor(M, lower=True)
    inv = scipy.linalg.cho_solve(c, np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


class GradientMatching:
    """Precomputed AG quantities for one grid, model and configuration.

    Per state dimension this holds the gradient operator D_k (so that
    m_{ẋ_k|x_k} = D_k x_k), the gradient-expert precision
    (C_{ẋ_k|x_k} + γ_k I)^{-1} and the interpolant prior precision; per
    force it holds the prior precision. All are immutable after setup.
    """

    def __init__(self, grid: TimeGrid, spec: ModelSpec, cfg: AGConfig):
        if len(cfg.state_hyp) != spec.dim_state:
            raise ValueError("need one state kernel per state dimension")
        self.grid, self.spec, self.cfg = grid, spec, cfg
        N = len(grid)
        gammas = cfg.gammas
        self.D, self.Lam, self.Cphi_inv = [], [], []
        for hyp, gam in zip(cfg.state_hyp, gammas):
            D, C = gradient_operator(grid, hyp)
            self.D.append(D)
            self.Lam.append(_sym_inv(C + gam * np.eye(N)))
            self.Cphi_inv.append(_sym_inv(cov_matrix(grid, hyp)))
        self.Cpsi_inv = [_sym_inv(cov_matrix(grid, hyp)) for hyp in spec.force_kernels]
        self.D = np.array(self.D)
        self.Lam = np.array(self.Lam)
        self.Cphi_inv = np.array(self.Cphi_inv)

    @property
    def N(self):
        return len(self.grid)

    # -- densities ---------------------------------------------------------

    def eta(self, state: AGState) -> np.ndarray:
        u, v, w = linear_reps(state, self.spec)
        f = np.einsum("kjn,jn->kn", u, state.X)
        m = np.einsum("knm,km->kn", self.D, state.X)
        return f - m

    def log_density(self, state: AGState) -> float:
        """Marginal AG log density of (X, g, beta), dropping constants."""
        eta = self.eta(state)
        q1 = np.einsum("kn,knm,km->", eta, self.Lam, eta)
        q2 = np.einsum("kn,knm,km->", state.X, self.Cphi_inv, state.X)
        return -0.5 * (q1 + q2)

    def log_prior_g(self, g) -> float:
        g = np.atleast_2d(g)
        return -0.5 * sum(gr @ P @ gr for gr, P in zip(g, self.Cpsi_inv))

    def log_prior_beta(self, beta) -> float:
        return -0.5 * np.sum(np.asarray(beta) ** 2) / self.spec.beta_prior_var

    def log_obs(self, state: AGState, obs: Observations | None) -> float:
        if obs is None or np.isinf(self.cfg.obs_noise_var):
            return 0.0
        r = obs.values.T - state.X
        return -0.5 * np.sum(r**2) / self.cfg.obs_noise_var

    def objective(self, state: AGState, obs: Observations | None = None) -> float:
        """Joint log density: AG term, force and beta priors, observations."""
        return (self.log_density(state) + self.log_prior_g(state.g)
                + self.log_prior_beta(state.beta) + self.log_obs(state, obs))

    # -- conditionals ------------------------------------------------------

    def cond_g(self, state: AGState) -> GaussianDist:
        """Gaussian conditional of vec(g) (force-major) given X and beta."""
        R, N = self.spec.n_forces, self.N
        _, v, _ = linear_reps(state, self.spec)
        m = np.einsum("knm,km->kn", self.D, state.X)
        P = scipy.linalg.block_diag(*self.Cpsi_inv) if R else np.zeros((0, 0))
        b = np.zeros(R * N)
        for k in range(self.spec.dim_state):
            Vk = v[k, 1:]                      # R×N
            Lk = self.Lam[k]
            P += (Vk[:, None, :, None] * Vk[None, :, None, :] * Lk).transpose(0, 2, 1, 3).reshape(R * N, R * N)
            b += (Vk * (Lk @ (m[k] - v[k, 0]))).ravel()
        return _gaussian_from_precision(P, b)

    def cond_beta(self, state: AGState) -> GaussianDist:
        """Gaussian conditional of vec(beta) (row-major) given X and g."""
        _, _, w = linear_reps(state, self.spec)
        K = self.spec.dim_state
        nb = w.shape[1] * w.shape[2]
        m = np.einsum("knm,km->kn", self.D, state.X)
        P = np.eye(nb) / self.spec.beta_prior_var
        b = np.zeros(nb)
        for k in range(K):
            Wk = w[k].reshape(nb, self.N).T     # N × (R+1)D
            LW = self.Lam[k] @ Wk
            P += Wk.T @ LW
            b += LW.T @ m[k]
        return _gaussian_from_precision(P, b)

    def cond_x(self, state: AGState, obs: Observations | None = None) -> GaussianDist:
        """Gaussian conditional of vec(X) (state-major) given g, beta and data."""
        K, N = self.spec.dim_state, self.N
        u, _, _ = linear_reps(state, self.spec)
        P = scipy.linalg.block_diag(*self.Cphi_inv)
        for k in range(K):
            # η_k = E_k vec(X)
            Ek = np.concatenate([np.diag(u[k, j]) for j in range(K)], axis=1)
            Ek[:, k * N:(k + 1) * N] -= self.D[k]
            P += Ek.T @ self.Lam[k] @ Ek
        b = np.zeros(K * N)
        if obs is not None and np.isfinite(self.cfg.obs_noise_var):
            P[np.diag_indices_from(P)] += 1.0 / self.cfg.obs_noise_var
            b += obs.values.T.ravel() / self.cfg.obs_noise_var
        return _gaussian_from_precision(P, b)


def ag_log_density(state: AGState, spec: ModelSpec, cfg: AGConfig, grid: TimeGrid) -> float:
    """Marginal AG log density of ``state`` up to a constant (no priors on g, beta)."""
    return GradientMatching(grid, spec, cfg).log_density(state)


@dataclass
class AGResult:
    state: AGState
    trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    status: str = "ok"


def default_init(obs: Observations, spec: ModelSpec, rng_seed=0, beta_scale=0.1) -> AGState:
    """X from the data, g = 0, beta small and random."""
    rng = np.random.default_rng(rng_seed)
    N = len(obs.grid)
    beta = beta_scale * rng.standard_normal(spec.beta.shape)
    return AGState(obs.values.T.copy(), np.zeros((spec.n_forces, N)), beta)


def ag_map(obs: Observations, spec: ModelSpec, cfg: AGConfig, init: AGState | None = None,
           rng_seed=0) -> AGResult:
    """Iterated conditional modes over the blocks X, g and (optionally) beta.

    Every block update moves to that block's conditional mean, so the joint
    objective cannot decrease; iteration stops once a sweep changes it by
    less than ``cfg.tol`` or after ``cfg.max_iter`` sweeps.
    """
    gm = GradientMatching(obs.grid, spec, cfg)
    if init is None:
        init = default_init(obs, spec, rng_seed)
        if not cfg.update_beta:
            init.beta = spec.beta.copy()
    state = init.copy()
    R, N = spec.n_forces, len(obs.grid)
    prev = gm.objective(state, obs)
    result = AGResult(state, [prev])
    for it in range(1, cfg.max_iter + 1):
        # forces first: the initial g = 0 carries no information, so an
        # X-step taken first would flatten the states toward zero gradient
        new = state.copy()
        new.g = gm.cond_g(new).mean.reshape(R, N)
        if cfg.update_beta:
            new.beta = gm.cond_beta(new).mean.reshape(spec.beta.shape)
        new.X = gm.cond_x(new, obs).mean.reshape(spec.dim_state, N)
        obj = gm.objective(new, obs)
        if not np.isfinite(obj):
            warnings.warn("AG objective became non-finite; returning last finite state",
                          RuntimeWarning)
            result.status = "diverged"
            break
        state = new
        result.trace.append(obj)
        result.n_iter = it
        if abs(obj - prev) < cfg.tol * max(1.0, abs(obj)):
            result.converged = True
            break
        prev = obj
    result.state = state
    return result


def ag_gibbs(obs: Observations | None, spec: ModelSpec, cfg: AGConfig, n_samples: int,
             rng_seed=0, init: AGState | None = None, blocks=("x", "g", "beta"),
             grid: TimeGrid | None = None) -> list:
    """Systematic-scan Gibbs sampler over the Gaussian conditionals.

    ``blocks`` selects which of ``"x"``, ``"g"``, ``"beta"`` are resampled;
    the rest stay frozen at ``init``.  Returns ``n_samples`` states.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    grid = obs.grid if obs is not None else grid
    if grid is None:
        raise ValueError("a grid is required when no observations are given")
    gm = GradientMatching(grid, spec, cfg)
    rng = np.random.default_rng(rng_seed)
    K, R, N = spec.dim_state, spec.n_forces, len(grid)
    if init is None:
        if obs is None:
            raise ValueError("an initial state is required when no observations are given")
        init = default_init(obs, spec, rng_seed)
    state = init.copy()
    chain = []
    for _ in range(n_samples):
        if "x" in blocks:
            state.X = _sample_from(gm.cond_x(state, obs), rng).reshape(K, N)
        if "g" in blocks and R:
            state.g = _sample_from(gm.cond_g(state), rng).reshape(R, N)
        if "beta" in blocks:
            state.beta = _sample_from(gm.cond_beta(state), rng).reshape(spec.beta.shape)
        chain.append(state.copy())
    return chain
