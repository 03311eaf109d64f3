"""Mixtures of successive approximations (MixSA) for the MLFM.

Around an anchor time τ_ν the ODE solution is approximated by M applications
of the discretised Picard map

    P v = v_ν ⊗ 1_N + K[g, beta] v,

started from μ_ν ⊗ 1_N, where K is a trapezoid discretisation of
∫_{τ_ν}^{t} A(s) v(s) ds.  Every observation y_n is then modelled by a
mixture over anchors of isotropic Gaussians centred at the local
approximations, and (g, beta, μ, π, α) are fitted by penalised EM.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.special import logsumexp

from .gp import TimeGrid, cov_matrix
from .model import BasisSet, ModelSpec, coefficient_path, mixing_weights
from .simulate import Observations

__all__ = [
    "MixSAConfig",
    "MixSAResult",
    "SuccessiveApproximations",
    "equally_spaced_anchors",
    "trapz_weights",
    "discrete_K",
    "picard_mean",
    "mixsa_em",
]

ALPHA_MAX = 1e12


def equally_spaced_anchors(grid: TimeGrid, n: int) -> list:
    """Grid indices nearest the centres of ``n`` equal sub-intervals."""
    t = grid.times
    centres = t[0] + (2 * np.arange(n) + 1) * (t[-1] - t[0]) / (2 * n)
    idx = [int(np.argmin(np.abs(t - c) + 1e-12 * np.arange(t.size))) for c in centres]
    if len(set(idx)) != n:
        raise ValueError(f"grid of {t.size} points cannot hold {n} distinct anchors")
    return idx


@dataclass
class MixSAConfig:
    order: int = 5
    anchors: list = field(default_factory=list)
    weights_pi: np.ndarray | None = None
    alpha: float = 100.0
    mu: np.ndarray | None = None
    update_pi: bool = True
    update_alpha: bool = True
    update_beta: bool = True
    update_g: bool = True
    update_mu: bool = True
    max_iter: int = 100
    tol: float = 1e-6
    inner_iter: int = 50
    refine: int = 1
    alpha_max: float = ALPHA_MAX

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order M must be at least 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.alpha_max <= 0:
            raise ValueError("alpha_max must be positive")
        self.alpha = min(self.alpha, self.alpha_max)
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.refine < 1:
            raise ValueError("refine must be at least 1")
        self.anchors = [int(a) for a in self.anchors]
        if self.weights_pi is not None:
            pi = np.asarray(self.weights_pi, dtype=float)
            if np.any(pi < 0) or abs(pi.sum() - 1) > 1e-10:
                raise ValueError("mixture weights must lie on the simplex")
            if self.anchors and pi.size != len(self.anchors):
                raise ValueError("one mixture weight per anchor")
            self.weights_pi = pi

    @property
    def n_mixtures(self):
        return len(self.anchors)

    def to_dict(self):
        return {
            "order": self.order,
            "anchors": list(self.anchors),
            "weights_pi": None if self.weights_pi is None else np.asarray(self.weights_pi).tolist(),
            "alpha": float(self.alpha),
            "mu": None if self.mu is None else np.asarray(self.mu).tolist(),
            "update_pi": self.update_pi,
            "update_alpha": self.update_alpha,
            "update_beta": self.update_beta,
            "update_g": self.update_g,
            "update_mu": self.update_mu,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "inner_iter": self.inner_iter,
            "refine": self.refine,
            "alpha_max": self.alpha_max,
        }


def trapz_weights(grid, anchor: int) -> np.ndarray:
    """Composite trapezoid weights for ∫_{t_anchor}^{t_n}; row n, column i.

    Rows before the anchor carry negative weights (reversed integral).
    """
    t = grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    N = t.size
    if not 0 <= anchor < N:
        raise IndexError(f"anchor {anchor} outside grid of {N} points")
    W = np.zeros((N, N))
    h = np.diff(t)
    for n in range(anchor + 1, N):
        W[n] = W[n - 1]
        W[n, n - 1] += 0.5 * h[n - 1]
        W[n, n] += 0.5 * h[n - 1]
    for n in range(anchor - 1, -1, -1):
        W[n] = W[n + 1]
        W[n, n] -= 0.5 * h[n]
        W[n, n + 1] -= 0.5 * h[n]
    return W


def discrete_K(g, beta, quad, basis: BasisSet) -> np.ndarray:
    """Dense NK×NK operator whose (n, i) block is w_ni A(t_i)."""
    A = coefficient_path(basis, beta, g)
    N, K = A.shape[0], A.shape[1]
    return np.einsum("ni,ikl->nkil", quad, A).reshape(N * K, N * K)


def _apply_K(quad, A, V):
    return quad @ np.einsum("ikl,il->ik", A, V)


def picard_mean(anchor: int, M: int, mu, g, beta, quad, basis: BasisSet) -> np.ndarray:
    """M Picard applications from μ ⊗ 1_N; returns an N×K array."""
    if M < 1:
        raise ValueError("M must be at least 1")
    A = coefficient_path(basis, beta, g)
    mu = np.asarray(mu, dtype=float)
    V = np.tile(mu, (quad.shape[0], 1))
    for _ in range(M):
        V = V[anchor] + _apply_K(quad, A, V)
    return V


class SuccessiveApproximations:
    """Local Picard regressions and their mixture for one data set.

    Forces live on a latent grid that splits every observation interval into
    ``cfg.refine`` equal steps (``refine=1`` uses the observation times
    themselves); anchors are observation indices.  Parameters (g, beta, μ,
    π, α) are passed explicitly so the same object serves the EM driver and
    standalone density evaluations.
    """

    def __init__(self, obs: Observations, spec: ModelSpec, cfg: MixSAConfig):
        if not cfg.anchors:
            raise ValueError("at least one anchor is required")
        self.obs, self.spec, self.cfg = obs, spec, cfg
        self.Y = obs.values
        self.N, self.K = self.Y.shape
        t = obs.grid.times
        steps = np.linspace(0.0, 1.0, cfg.refine + 1)[:-1]
        latent = (t[:-1, None] + np.diff(t)[:, None] * steps[None, :]).ravel()
        self.latent_grid = TimeGrid(np.append(latent, t[-1]))
        self.obs_idx = cfg.refine * np.arange(self.N)
        self.quads = [trapz_weights(self.latent_grid, self.obs_idx[a]) for a in cfg.anchors]

    @property
    def n_latent(self):
        return len(self.latent_grid)

    def at_obs(self, g):
        """Latent force values at the observation times."""
        return np.atleast_2d(g)[:, self.obs_idx]

    @property
    def basis(self):
        return self.spec.basis

    def mean(self, nu: int, g, beta, mu) -> np.ndarray:
        """Order-M local approximation at the observation times; N×K."""
        return picard_mean(self.obs_idx[self.cfg.anchors[nu]], self.cfg.order, mu, g, beta,
                           self.quads[nu], self.basis)[self.obs_idx]

    def pointwise_log_density(self, nu, g, beta, mu, alpha) -> np.ndarray:
        """log N(y_n | m_νn, α⁻¹ I) for every n."""
        r = self.Y - self.mean(nu, g, beta, mu)
        return 0.5 * self.K * np.log(alpha / (2 * np.pi)) - 0.5 * alpha * np.sum(r**2, axis=1)

    def local_log_density(self, nu, g, beta, mu, alpha) -> float:
        return float(np.sum(self.pointwise_log_density(nu, g, beta, mu, alpha)))

    def _log_joint(self, g, beta, mus, pi, alpha) -> np.ndarray:
        # N × n_mix table of log π_ν + log p_ν(y_n)
        with np.errstate(divide="ignore"):
            logpi = np.log(pi)
        return np.stack([logpi[v] + self.pointwise_log_density(v, g, beta, mus[v], alpha)
                         for v in range(len(self.cfg.anchors))], axis=1)

    def mixture_log_lik(self, g, beta, mus, pi, alpha) -> float:
        """Σ_n log Σ_ν π_ν N(y_n | m_νn, α⁻¹ I)."""
        return float(np.sum(logsumexp(self._log_joint(g, beta, mus, pi, alpha), axis=1)))

    def responsibilities(self, g, beta, mus, pi, alpha) -> np.ndarray:
        """N × n_mix matrix; each row is the posterior over anchors for y_n."""
        lj = self._log_joint(g, beta, mus, pi, alpha)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def picard_gradient(self, nu, g, beta, mu, alpha, weights=None):
        """Gradient of Σ_n weights_n log N(y_n | m_νn, α⁻¹ I).

        Returns ``(value, d_g, d_beta, d_mu)``.  The Picard recursion is
        differentiated in reverse: each application is linear in its input
        and linear in the mixing weights c_nd = β_0d + Σ_r g_rn β_rd.
        """
        anchor, M, quad = self.obs_idx[self.cfg.anchors[nu]], self.cfg.order, self.quads[nu]
        L = self.basis.matrices
        g = np.atleast_2d(np.asarray(g, dtype=float))
        beta = np.asarray(beta, dtype=float)
        weights = np.ones(self.N) if weights is None else np.asarray(weights)
        coef = mixing_weights(beta, g)
        A = np.einsum("nd,dij->nij", coef, L)
        V = np.tile(np.asarray(mu, dtype=float), (self.n_latent, 1))
        history = []
        for _ in range(M):
            history.append(V)
            V = V[anchor] + _apply_K(quad, A, V)
        resid = self.Y - V[self.obs_idx]
        value = float(np.sum(weights * (0.5 * self.K * np.log(alpha / (2 * np.pi))
                                        - 0.5 * alpha * np.sum(resid**2, axis=1))))
        lam = np.zeros_like(V)
        lam[self.obs_idx] = alpha * weights[:, None] * resid
        d_mu = np.zeros(self.K)
        d_coef = np.zeros_like(coef)
        for Vj in reversed(history):
            d_mu += lam.sum(axis=0)
            lw = quad.T @ lam
            d_coef += np.einsum("ik,dkl,il->id", lw, L, Vj)
            lam = np.einsum("ikl,ik->il", A, lw)
        d_mu += lam.sum(axis=0)
        d_beta = np.vstack([d_coef.sum(axis=0), g @ d_coef])
        d_g = beta[1:] @ d_coef.T
        return value, d_g, d_beta, d_mu


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------

@dataclass
class MixSAResult:
    g: np.ndarray
    beta: np.ndarray
    cfg: MixSAConfig
    responsibilities: np.ndarray
    trace: list
    converged: bool = False
    n_iter: int = 0
    status: str = "ok"
    latent_times: np.ndarray | None = None
    obs_idx: np.ndarray | None = None

    @property
    def g_obs(self) -> np.ndarray:
        """Fitted forces at the observation times."""
        return self.g if self.obs_idx is None else self.g[:, self.obs_idx]


class _Penalised:
    """Packs (g, beta, μ) into one vector in whitened force coordinates."""

    def __init__(self, sa: SuccessiveApproximations, cfg: MixSAConfig, beta_fixed, g_fixed,
                 mus_fixed):
        self.sa, self.cfg = sa, cfg
        spec = sa.spec
        self.R, self.N, self.K = spec.n_forces, sa.n_latent, sa.K
        self.chol = [np.linalg.cholesky(cov_matrix(sa.latent_grid, h))
                     for h in spec.force_kernels]
        self.beta_shape = spec.beta.shape
        self.beta_fixed, self.g_fixed, self.mus_fixed = beta_fixed, g_fixed, mus_fixed
        self.n_mix = cfg.n_mixtures

    def whiten(self, g):
        return np.stack([scipy.linalg.solve_triangular(L, gr, lower=True)
                         for L, gr in zip(self.chol, g)]) if self.R else np.zeros((0, self.N))

    def color(self, z):
        return np.stack([L @ zr for L, zr in zip(self.chol, z)]) if self.R else np.zeros((0, self.N))

    def pack(self, g, beta, mus):
        parts = []
        if self.cfg.update_g:
            parts.append(self.whiten(g).ravel())
        if self.cfg.update_beta:
            parts.append(np.asarray(beta).ravel())
        if self.cfg.update_mu:
            parts.append(np.asarray(mus).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, theta):
        i = 0
        if self.cfg.update_g:
            z = theta[i:i + self.R * self.N].reshape(self.R, self.N)
            i += self.R * self.N
            g = self.color(z)
        else:
            z, g = None, self.g_fixed
        if self.cfg.update_beta:
            nb = self.beta_shape[0] * self.beta_shape[1]
            beta = theta[i:i + nb].reshape(self.beta_shape)
            i += nb
        else:
            beta = self.beta_fixed
        if self.cfg.update_mu:
            mus = theta[i:].reshape(self.n_mix, self.K)
        else:
            mus = self.mus_fixed
        return z, g, beta, mus

    def log_prior(self, g, beta):
        z = self.whiten(g)
        return -0.5 * np.sum(z**2) - 0.5 * np.sum(beta**2) / self.sa.spec.beta_prior_var

    def neg_q(self, theta, resp, alpha):
        """Negative expected complete-data log posterior and its gradient."""
        z, g, beta, mus = self.unpack(theta)
        val = 0.0
        dg = np.zeros((self.R, self.N))
        dbeta = np.zeros(self.beta_shape)
        dmus = np.zeros((self.n_mix, self.K))
        for v in range(self.n_mix):
            f, a, b, c = self.sa.picard_gradient(v, g, beta, mus[v], alpha, resp[:, v])
            val += f
            dg += a
            dbeta += b
            dmus[v] = c
        if z is None:
            z = self.whiten(g)
        val += -0.5 * np.sum(z**2) - 0.5 * np.sum(beta**2) / self.sa.spec.beta_prior_var
        grads = []
        if self.cfg.update_g:
            dz = np.stack([L.T @ d for L, d in zip(self.chol, dg)]) - z
            grads.append(dz.ravel())
        if self.cfg.update_beta:
            grads.append((dbeta - beta / self.sa.spec.beta_prior_var).ravel())
        if self.cfg.update_mu:
            grads.append(dmus.ravel())
        grad = np.concatenate(grads) if grads else np.zeros(0)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(theta)
        return -val, -grad


def nearest_anchor_resp(grid: TimeGrid, anchors) -> np.ndarray:
    """Assign every observation to its closest anchor, splitting ties evenly.

    Points midway between anchors are shared, which couples neighbouring
    components from the first M-step onwards.
    """
    t = grid.times
    d = np.abs(t[:, None] - t[np.asarray(anchors)][None, :])
    resp = (d <= d.min(axis=1, keepdims=True) + 1e-9 * (1 + d.max())).astype(float)
    return resp / resp.sum(axis=1, keepdims=True)


def mixsa_em(obs: Observations, spec: ModelSpec, cfg: MixSAConfig, init_g=None, init_beta=None,
             rng_seed=0, init_resp="nearest") -> MixSAResult:
    """Penalised EM for the MixSA likelihood.

    E-step: responsibilities of each anchor for each observation.  M-step:
    L-BFGS on (g, beta, μ) with the force prior whitened, then closed-form
    updates of π (if enabled) and α.  The penalised objective is checked
    after every cycle; a decrease beyond round-off raises ``RuntimeError``.
    """
    N = len(obs.grid)
    if not cfg.anchors:
        cfg = replace(cfg, anchors=equally_spaced_anchors(obs.grid, 1))
    rng = np.random.default_rng(rng_seed)
    n_mix = cfg.n_mixtures
    n_latent = cfg.refine * (N - 1) + 1
    g = np.zeros((spec.n_forces, n_latent)) if init_g is None else np.array(init_g, dtype=float)
    if init_beta is not None:
        beta = np.array(init_beta, dtype=float)
    elif cfg.update_beta:
        beta = 0.1 * rng.standard_normal(spec.beta.shape)
    else:
        beta = spec.beta.copy()
    if cfg.mu is None:
        mus = obs.values[cfg.anchors].copy()
    else:
        mus = np.array(cfg.mu, dtype=float).reshape(n_mix, obs.dim_state)
    pi = np.full(n_mix, 1.0 / n_mix) if cfg.weights_pi is None else np.array(cfg.weights_pi)
    alpha = float(cfg.alpha)

    if isinstance(init_resp, str):
        if init_resp != "nearest":
            raise ValueError(f"unknown responsibility initialisation {init_resp!r}")
        init_resp = nearest_anchor_resp(obs.grid, cfg.anchors)

    sa = SuccessiveApproximations(obs, spec, cfg)
    pen = _Penalised(sa, cfg, beta, g, mus)

    def objective(g, beta, mus, pi, alpha):
        return sa.mixture_log_lik(g, beta, mus, pi, alpha) + pen.log_prior(g, beta)

    obj = objective(g, beta, mus, pi, alpha)
    if not np.isfinite(obj):
        raise FloatingPointError("initial MixSA objective is not finite")
    trace = [obj]
    status, converged, it = "ok", False, 0
    for it in range(1, cfg.max_iter + 1):
        if it == 1 and init_resp is not None:
            resp = init_resp
        else:
            resp = sa.responsibilities(g, beta, mus, pi, alpha)
        theta0 = pen.pack(g, beta, mus)
        if theta0.size:
            f0, _ = pen.neg_q(theta0, resp, alpha)
            res = minimize(pen.neg_q, theta0, args=(resp, alpha), jac=True, method="L-BFGS-B",
                           options={"maxiter": cfg.inner_iter, "gtol": 1e-12, "ftol": 1e-15})
            if np.isfinite(res.fun) and res.fun <= f0:
                _, g, beta, mus = pen.unpack(res.x)
        if cfg.update_pi:
            pi = resp.mean(axis=0)
        if cfg.update_alpha:
            sq = sum(resp[:, v] @ np.sum((sa.Y - sa.mean(v, g, beta, mus[v])) ** 2, axis=1)
                     for v in range(n_mix))
            alpha = min(N * sa.K / max(sq, 1e-300), cfg.alpha_max)
        new = objective(g, beta, mus, pi, alpha)
        if not np.isfinite(new):
            status = "nonfinite"
            warnings.warn("MixSA objective became non-finite", RuntimeWarning)
            break
        if new < obj - 1e-8 * max(1.0, abs(obj)) and not (it == 1 and init_resp is not None):
            raise RuntimeError(
                f"EM objective decreased from {obj!r} to {new!r} at cycle {it}")
        trace.append(new)
        done = abs(new - obj) < cfg.tol * max(1.0, abs(new))
        obj = new
        if done:
            converged = True
            break

    resp = sa.responsibilities(g, beta, mus, pi, alpha)
    fitted = replace(cfg, weights_pi=pi, alpha=alpha, mu=mus)
    return MixSAResult(g, beta, fitted, resp, trace, converged, it, status,
                       sa.latent_grid.times.copy(), sa.obs_idx.copy())
