"""Squared-exponential Gaussian process utilities.

Kernel evaluations and their time derivatives, covariance assembly, prior
sampling, marginal-likelihood hyperparameter fitting, and the conditional
distribution of a GP's gradient given its values on a grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

__all__ = [
    "KernelHyp",
    "TimeGrid",
    "GaussianDist",
    "HyperFit",
    "rbf_eval",
    "rbf_cross_grad",
    "rbf_grad_grad",
    "cov_matrix",
    "cross_grad_matrix",
    "grad_grad_matrix",
    "gradient_conditional",
    "gradient_operator",
    "fit_hyperparams",
    "gp_sample",
    "gp_interpolate",
]

AMPLITUDE_FLOOR = 1e-6


@dataclass(frozen=True)
class KernelHyp:
    """RBF hyperparameters: signal variance and lengthscale."""

    amplitude_sq: float
    lengthscale: float

    def __post_init__(self):
        if not (self.amplitude_sq > 0 and np.isfinite(self.amplitude_sq)):
            raise ValueError(f"amplitude_sq must be positive, got {self.amplitude_sq}")
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")


class TimeGrid:
    """Strictly increasing vector of observation times."""

    def __init__(self, times):
        times = np.asarray(times, dtype=float).ravel()
        if times.size < 2:
            raise ValueError("a time grid needs at least two points")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        self.times = times
        self.times.setflags(write=False)

    @classmethod
    def uniform(cls, start, stop, step):
        n = int(round((stop - start) / step)) + 1
        return cls(start + step * np.arange(n))

    def __len__(self):
        return self.times.size

    def __repr__(self):
        return f"TimeGrid(N={len(self)}, [{self.times[0]:g}, {self.times[-1]:g}])"

    @property
    def spacing(self):
        return np.diff(self.times)

    @property
    def span(self):
        return float(self.times[-1] - self.times[0])


@dataclass
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def sd(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float).ravel()
        chol = scipy.linalg.cho_factor(self.cov, lower=True)
        r = x - self.mean
        q = r @ scipy.linalg.cho_solve(chol, r)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        return -0.5 * (q + logdet + r.size * np.log(2 * np.pi))

    def sample(self, rng):
        chol = np.linalg.cholesky(self.cov)
        return self.mean + chol @ rng.standard_normal(self.mean.size)


def _times(grid):
    return grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float).ravel()


def rbf_eval(t, s, hyp: KernelHyp):
    """k(t, s) = σ² exp(-(t - s)² / 2ℓ²), broadcasting over t and s."""
    d = np.subtract(t, s)
    return hyp.amplitude_sq * np.exp(-0.5 * d**2 / hyp.lengthscale**2)


def rbf_cross_grad(t, s, hyp: KernelHyp):
    """∂k(t, s)/∂t."""
    d = np.subtract(t, s)
    return -(d / hyp.lengthscale**2) * rbf_eval(t, s, hyp)


def rbf_grad_grad(t, s, hyp: KernelHyp):
    """∂²k(t, s)/∂t∂s."""
    d = np.subtract(t, s)
    ell2 = hyp.lengthscale**2
    return (1.0 / ell2 - d**2 / ell2**2) * rbf_eval(t, s, hyp)


def default_jitter(hyp: KernelHyp) -> float:
    return 1e-8 * hyp.amplitude_sq


def cov_matrix(grid, hyp: KernelHyp, jitter=None):
    t = _times(grid)
    if jitter is None:
        jitter = default_jitter(hyp)
    K = rbf_eval(t[:, None], t[None, :], hyp)
    K[np.diag_indices_from(K)] += jitter
    return K


def cross_grad_matrix(grid, hyp: KernelHyp):
    """Cov(ẋ(t_i), x(t_j))."""
    t = _times(grid)
    return rbf_cross_grad(t[:, None], t[None, :], hyp)


def grad_grad_matrix(grid, hyp: KernelHyp):
    """Cov(ẋ(t_i), ẋ(t_j))."""
    t = _times(grid)
    return rbf_grad_grad(t[:, None], t[None, :], hyp)


def gradient_operator(grid, hyp: KernelHyp, jitter=None):
    """Return ``(D, C)`` with E[ẋ | x] = D @ x and C = Cov[ẋ | x].

    The covariance is symmetrised; it does not depend on x.
    """
    Cxx = cov_matrix(grid, hyp, jitter)
    Cdx = cross_grad_matrix(grid, hyp)
    Cdd = grad_grad_matrix(grid, hyp)
    try:
        chol = scipy.linalg.cho_factor(Cxx, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("state covariance is numerically singular") from exc
    # D = Cdx Cxx^{-1}; Cxx symmetric so solve on the transpose
    D = scipy.linalg.cho_solve(chol, Cdx.T).T
    C = Cdd - D @ Cdx.T
    C = 0.5 * (C + C.T)
    return D, C


def gradient_conditional(grid, hyp: KernelHyp, x, jitter=None) -> GaussianDist:
    """Distribution of a GP's gradient at the grid given its values ``x`` there."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != len(_times(grid)):
        raise ValueError("x must have one value per grid point")
    D, C = gradient_operator(grid, hyp, jitter)
    return GaussianDist(D @ x, C)


def gp_interpolate(grid, values, hyp: KernelHyp, new_times):
    """Posterior mean at ``new_times`` of a zero-mean GP pinned to ``values``."""
    t = _times(grid)
    K = cov_matrix(t, hyp)
    Ks = rbf_eval(np.asarray(new_times)[:, None], t[None, :], hyp)
    return Ks @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(K, lower=True), values)


def gp_sample(grid, hyp: KernelHyp, rng_seed) -> np.ndarray:
    """One draw from N(0, cov_matrix(grid, hyp)), reproducible per seed."""
    rng = np.random.default_rng(rng_seed)
    K = cov_matrix(grid, hyp)
    # dense fine grids make the RBF Gram matrix rank deficient at 1e-8 jitter,
    # so sample through an eigendecomposition rather than Cholesky
    evals, evecs = np.linalg.eigh(K)
    evals = np.clip(evals, 0.0, None)
    return evecs @ (np.sqrt(evals) * rng.standard_normal(evals.size))


@dataclass
class HyperFit:
    hyp: KernelHyp
    log_marginal: float
    converged: bool
    degenerate: bool = False


def _neg_log_marginal(logp, t, y, noise_var):
    hyp = KernelHyp(np.exp(logp[0]), np.exp(logp[1]))
    K = cov_matrix(t, hyp, jitter=noise_var + default_jitter(hyp))
    try:
        c, low = scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return np.inf
    alpha = scipy.linalg.cho_solve((c, low), y)
    return 0.5 * y @ alpha + np.sum(np.log(np.diag(c))) + 0.5 * y.size * np.log(2 * np.pi)


def fit_hyperparams(grid, y, noise_var, n_starts=5, rng_seed=0) -> HyperFit:
    """Maximise the GP log marginal likelihood of ``y`` with fixed noise.

    Multi-start L-BFGS-B in log space.  The returned ``HyperFit`` carries a
    ``converged`` flag (False if every start failed) and a ``degenerate`` flag
    set when the amplitude sits on its floor.
    """
    t = _times(grid)
    y = np.asarray(y, dtype=float).ravel()
    if t.size < 3:
        raise ValueError("need at least 3 points to fit hyperparameters")
    span = t[-1] - t[0]
    min_dt = np.min(np.diff(t))
    yvar = max(float(np.var(y) + np.mean(y) ** 2), AMPLITUDE_FLOOR)
    bounds = [
        (np.log(AMPLITUDE_FLOOR), np.log(max(100.0 * yvar, 1.0))),
        (np.log(0.5 * min_dt), np.log(10.0 * span)),
    ]
    rng = np.random.default_rng(rng_seed)
    starts = [np.array([np.log(yvar), np.log(0.25 * span)])]
    for _ in range(n_starts - 1):
        starts.append(np.array([rng.uniform(*b) for b in bounds]))

    best, any_ok = None, False
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(_neg_log_marginal, x0, args=(t, y, noise_var),
                       method="L-BFGS-B", bounds=bounds)
        any_ok |= bool(res.success)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        warnings.warn("hyperparameter fit failed from every start", RuntimeWarning)
        return HyperFit(KernelHyp(yvar, 0.25 * span), -np.inf, False, True)
    amp, ell = np.exp(best.x)
    amp = max(amp, AMPLITUDE_FLOOR)
    degenerate = amp <= AMPLITUDE_FLOOR * (1 + 1e-6)
    if not any_ok:
        warnings.warn("hyperparameter optimiser did not report convergence", RuntimeWarning)
    return HyperFit(KernelHyp(float(amp), float(ell)), -float(best.fun), any_ok, bool(degenerate))
