"""Seeded simulation studies: the random harmonic oscillator and SO(3).

Each replication draws its own ground truth from a seed derived from
``(base_seed, experiment, rep)``, so results do not depend on the order in
which replications run or on how they are split across processes.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ag import AGConfig, ag_map
from .gp import KernelHyp, TimeGrid, fit_hyperparams, gp_interpolate
from .mixsa import MixSAConfig, equally_spaced_anchors, mixsa_em
from .model import ModelSpec, preset_basis, read_config, stack_basis
from .simulate import (DensePath, observe, sample_force_path, simulate_fundamental,
                       simulate_state)

__all__ = [
    "ExperimentConfig",
    "ErrorRecord",
    "run_kubo",
    "run_so3",
    "run_experiment",
    "reconstruction_error",
    "resolve_fundamental",
    "sample_sphere",
    "summarise",
    "write_results",
    "experiment_config_from_dict",
]

_EXPERIMENT_CODE = {"kubo": 1, "so3": 3}

# desk-scale defaults; the force kernels are not stated for either study
_DEFAULTS = {
    "kubo": dict(force_kernel=(1.0, 1.0), orders=(5,), n_anchors=(1, 2, 3)),
    "so3": dict(force_kernel=(0.25, 2.0), orders=(3, 5, 7), n_anchors=(2,)),
}

# exceptions that mark a replication's fit as failed rather than aborting the run
_FIT_ERRORS = (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError)


@dataclass
class ExperimentConfig:
    experiment: str
    dt: float = 0.5
    dts: tuple | None = None
    horizon: tuple = (0.0, 6.0)
    n_reps: int = 20
    base_seed: int = 0
    noise_sd: float = 0.01
    force_kernel: tuple | None = None
    orders: tuple | None = None
    n_anchors: tuple | None = None
    ag: dict = field(default_factory=dict)
    mixsa: dict = field(default_factory=dict)
    path_substeps: int = 50
    n_jobs: int = 1

    def __post_init__(self):
        if self.experiment not in _DEFAULTS:
            raise ValueError(f"experiment must be 'kubo' or 'so3', got {self.experiment!r}")
        if self.dts is not None:
            self.dts = tuple(float(d) for d in self.dts)
            if not self.dts:
                raise ValueError("dts must not be empty")
        if not (self.dt > 0 and all(d > 0 for d in self.dts or ())):
            raise ValueError("dt must be positive")
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        self.horizon = tuple(float(h) for h in self.horizon)
        if len(self.horizon) != 2 or self.horizon[1] <= self.horizon[0]:
            raise ValueError("horizon must be an increasing pair")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        defaults = _DEFAULTS[self.experiment]
        for name in ("force_kernel", "orders", "n_anchors"):
            value = getattr(self, name)
            setattr(self, name, tuple(defaults[name] if value is None else value))
        self.orders = tuple(int(m) for m in self.orders)
        self.n_anchors = tuple(int(d) for d in self.n_anchors)

    @property
    def kernel(self) -> KernelHyp:
        return KernelHyp(*map(float, self.force_kernel))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.horizon[0], self.horizon[1], self.dt)

    @property
    def noise_var(self) -> float:
        # the fits need a positive noise level even for noiseless data
        return max(self.noise_sd**2, 1e-8)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("horizon", "force_kernel", "orders", "n_anchors", "dts"):
            d[k] = None if d[k] is None else list(d[k])
        return d


def experiment_config_from_dict(cfg: dict, **overrides) -> ExperimentConfig:
    """Build a config from a dict (or the ``experiment`` table of one)."""
    if isinstance(cfg.get("experiment"), dict):
        cfg = cfg["experiment"]
    cfg = dict(cfg)
    if isinstance(cfg.get("dt"), (list, tuple)):
        cfg["dts"], cfg["dt"] = cfg["dt"], cfg["dt"][0]
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
    return ExperimentConfig(**cfg)


def load_experiment_config(path, **overrides) -> ExperimentConfig:
    return experiment_config_from_dict(read_config(path), **overrides)


@dataclass
class ErrorRecord:
    rep: int
    method: str
    setting: str
    dt: float
    error: float
    status: str = "ok"

    def __post_init__(self):
        if self.status != "failed" and not (np.isfinite(self.error) and self.error >= 0):
            raise ValueError("error must be finite and nonnegative for a successful fit")


def reconstruction_error(X_true, X_hat) -> float:
    """Frobenius norm of ``X_true - X_hat`` over every grid point and entry."""
    X_true = np.asarray(X_true, dtype=float)
    X_hat = np.asarray(X_hat, dtype=float)
    if X_true.shape != X_hat.shape:
        raise ValueError(f"shape mismatch: {X_true.shape} vs {X_hat.shape}")
    return float(np.linalg.norm((X_true - X_hat).ravel()))


def sample_sphere(rng, n, dim=3) -> np.ndarray:
    """``n`` points uniform on the unit sphere in R^dim; n×dim."""
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rep_seeds(cfg: ExperimentConfig, rep: int):
    """Independent (truth, noise, fit) seed sequences for one replication."""
    ss = np.random.SeedSequence([cfg.base_seed, _EXPERIMENT_CODE[cfg.experiment], rep])
    return ss.spawn(3)


def _status(converged):
    return "ok" if converged else "nonconverged"


def _fit_state_hyps(cfg, grid, values):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return [fit_hyperparams(grid, values[:, k], cfg.noise_var).hyp
                for k in range(values.shape[1])]


def _mixsa_cfg(cfg, grid, order, n_anchor, update_beta):
    settings = dict(refine=5, alpha_max=1.0 / cfg.noise_var)
    settings.update(cfg.mixsa)
    return MixSAConfig(order=order, anchors=equally_spaced_anchors(grid, n_anchor),
                       update_beta=update_beta, **settings)


def _failed(rep, method, setting, dt):
    return ErrorRecord(rep, method, setting, dt, float("nan"), "failed")


def kubo_rep(cfg: ExperimentConfig, rep: int) -> list[ErrorRecord]:
    """One oscillator replication; errors are ‖ĝ − g*‖₂ over the observation times."""
    s_truth, s_obs, s_fit = rep_seeds(cfg, rep)
    spec = ModelSpec(preset_basis("so2"), [[0.0], [1.0]], [cfg.kernel])
    grid = cfg.grid
    t0, t1 = cfg.horizon
    s_path, s_x0 = s_truth.spawn(2)
    path = sample_force_path(spec, t0, t1, cfg.dt / cfg.path_substeps, s_path)
    angle = np.random.default_rng(s_x0).uniform(0.0, 2 * np.pi)
    X = simulate_state(spec, path, [np.cos(angle), np.sin(angle)], grid)
    obs = observe(X, cfg.noise_sd, s_obs, grid)
    g_true = path.at(grid.times)

    records = []
    try:
        hyps = _fit_state_hyps(cfg, grid, obs.values)
        res = ag_map(obs, spec, AGConfig(hyps, cfg.noise_var, update_beta=False, **cfg.ag),
                     rng_seed=s_fit)
        err = float(np.linalg.norm(res.state.g - g_true))
        status = "failed" if res.status == "diverged" else _status(res.converged)
        records.append(ErrorRecord(rep, "ag", "", cfg.dt, err, status))
    except _FIT_ERRORS:
        records.append(_failed(rep, "ag", "", cfg.dt))
    for order in cfg.orders:
        for n_anchor in cfg.n_anchors:
            setting = f"D={n_anchor};M={order}"
            try:
                mc = _mixsa_cfg(cfg, grid, order, n_anchor, update_beta=False)
                r = mixsa_em(obs, spec, mc, rng_seed=s_fit)
                err = float(np.linalg.norm(r.g_obs - g_true))
                status = "failed" if r.status != "ok" else _status(r.converged)
                records.append(ErrorRecord(rep, "mixsa", setting, cfg.dt, err, status))
            except _FIT_ERRORS:
                records.append(_failed(rep, "mixsa", setting, cfg.dt))
    return records


def resolve_fundamental(base: ModelSpec, beta, times, g, grid: TimeGrid, kernel=None,
                        step=0.01):
    """Fundamental solution on ``grid`` driven by forces known at ``times``.

    With ``kernel`` the forces are GP-interpolated, otherwise linearly.
    """
    fine = TimeGrid.uniform(grid.times[0], grid.times[-1], step)
    g = np.atleast_2d(g)
    if kernel is None:
        gf = np.array([np.interp(fine.times, times, gr) for gr in g])
    else:
        gf = np.array([gp_interpolate(times, gr, kernel, fine.times) for gr in g])
    return simulate_fundamental(base.with_beta(beta), DensePath(fine, gf), grid)


def so3_rep(cfg: ExperimentConfig, rep: int) -> list[ErrorRecord]:
    """One SO(3) replication; errors are reconstruction errors of the fundamental solution."""
    s_truth, s_obs, s_fit = rep_seeds(cfg, rep)
    s_path, s_beta = s_truth.spawn(2)
    beta = sample_sphere(np.random.default_rng(s_beta), 2)
    base = ModelSpec(preset_basis("so3"), beta, [cfg.kernel])
    # the nine entries evolve as three stacked columns under one A(t)
    spec = ModelSpec(stack_basis(base.basis, 3), beta, [cfg.kernel])
    grid = cfg.grid
    t0, t1 = cfg.horizon
    path = sample_force_path(spec, t0, t1, cfg.dt / cfg.path_substeps, s_path)
    F = simulate_fundamental(base, path, grid)
    states = F.transpose(0, 2, 1).reshape(len(grid), 9)
    obs = observe(states, cfg.noise_sd, s_obs, grid)

    records = []
    try:
        hyps = _fit_state_hyps(cfg, grid, obs.values)
        res = ag_map(obs, spec, AGConfig(hyps, cfg.noise_var, **cfg.ag), rng_seed=s_fit)
        X = resolve_fundamental(base, res.state.beta, grid.times, res.state.g, grid,
                                kernel=cfg.kernel)
        status = "failed" if res.status == "diverged" else _status(res.converged)
        records.append(ErrorRecord(rep, "ag", "", cfg.dt, reconstruction_error(F, X), status))
    except _FIT_ERRORS:
        records.append(_failed(rep, "ag", "", cfg.dt))
    for order in cfg.orders:
        for n_anchor in cfg.n_anchors:
            setting = f"D={n_anchor};M={order}"
            try:
                mc = _mixsa_cfg(cfg, grid, order, n_anchor, update_beta=True)
                r = mixsa_em(obs, spec, mc, rng_seed=s_fit)
                X = resolve_fundamental(base, r.beta, r.latent_times, r.g, grid)
                status = "failed" if r.status != "ok" else _status(r.converged)
                records.append(ErrorRecord(rep, "mixsa", setting, cfg.dt,
                                           reconstruction_error(F, X), status))
            except _FIT_ERRORS:
                records.append(_failed(rep, "mixsa", setting, cfg.dt))
    return records


_REP_FUNCS = {"kubo": kubo_rep, "so3": so3_rep}


def _run(cfg: ExperimentConfig) -> list[ErrorRecord]:
    fn = _REP_FUNCS[cfg.experiment]
    reps = range(cfg.n_reps)
    if cfg.n_jobs == 1:
        chunks = [fn(cfg, r) for r in reps]
    else:
        workers = cfg.n_jobs if cfg.n_jobs > 0 else os.cpu_count()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, [cfg] * cfg.n_reps, reps))
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.rep, r.method, r.setting))
    return records


def run_kubo(cfg: ExperimentConfig) -> list[ErrorRecord]:
    if cfg.experiment != "kubo":
        raise ValueError("run_kubo needs an experiment = 'kubo' config")
    return _run(cfg)


def run_so3(cfg: ExperimentConfig) -> list[ErrorRecord]:
    if cfg.experiment != "so3":
        raise ValueError("run_so3 needs an experiment = 'so3' config")
    return _run(cfg)


def run_experiment(cfg: ExperimentConfig) -> list[ErrorRecord]:
    """Run the config at each spacing in ``cfg.dts`` (default: just ``cfg.dt``)."""
    records = []
    for dt in cfg.dts or (cfg.dt,):
        records += _run(replace(cfg, dt=dt, dts=None))
    return records


def summarise(records: list[ErrorRecord]) -> list[dict]:
    """Mean and sd of error per (method, setting, dt) over non-failed reps."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.setting, r.dt), []).append(r)
    rows = []
    for (method, setting, dt), recs in sorted(groups.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1])):
        ok = np.array([r.error for r in recs if r.status != "failed"])
        rows.append({
            "method": method,
            "setting": setting,
            "dt": dt,
            "mean_error": float(ok.mean()) if ok.size else float("nan"),
            "sd_error": float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size else float("nan")),
            "n_ok": int(ok.size),
            "n_failed": sum(r.status == "failed" for r in recs),
            "n_nonconverged": sum(r.status == "nonconverged" for r in recs),
        })
    return rows


def _fmt(x):
    return format(x, ".17g") if isinstance(x, float) else str(x)


def write_results(records: list[ErrorRecord], out_dir, cfg: ExperimentConfig | None = None,
                  wall_time: float | None = None):
    """Write ``errors.csv``, ``summary.csv`` and (with ``cfg``) ``meta.json``.

    The CSV files depend only on the records; timing goes to ``meta.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "method", "setting", "dt", "error", "status"])
        for r in records:
            w.writerow([r.rep, r.method, r.setting, _fmt(r.dt), _fmt(r.error), r.status])
    rows = summarise(records)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["method", "setting", "dt", "mean_error", "sd_error", "n_ok", "n_failed",
                "n_nonconverged"]
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])
    if cfg is not None:
        echo = cfg.to_dict()
        echo.pop("n_jobs")
        meta = {"config": echo, "seed": cfg.base_seed, "version": __version__,
                "wall_time_s": wall_time}
        with open(out / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rows
