"""Command-line entry point: ``mlfm simulate | fit-ag | fit-mixsa | experiment``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ag import AGConfig, ag_map
from .experiments import experiment_config_from_dict, run_experiment, write_results
from .gp import KernelHyp, TimeGrid, fit_hyperparams
from .mixsa import MixSAConfig, equally_spaced_anchors, mixsa_em
from .model import model_spec_from_dict, model_spec_to_dict, read_config
from .simulate import (observe, read_observations_csv, sample_force_path, simulate_fundamental,
                       simulate_state, write_trajectory_csv)


DEFAULT_DTS = (0.5, 1.0)


def _load(path):
    return read_config(path) if path else {}


def _model(cfg):
    if "model" not in cfg and "basis" not in cfg:
        raise SystemExit("config needs a [model] table (or top-level basis/n_forces keys)")
    return model_spec_from_dict(cfg.get("model", cfg))


def _tolist(x):
    return np.asarray(x).tolist()


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def cmd_simulate(args):
    cfg = _load(args.config)
    spec = _model(cfg)
    sim = cfg.get("simulate", {})
    t0, t1 = map(float, sim.get("horizon", (0.0, 6.0)))
    dt = float(sim.get("dt", 0.5))
    noise_sd = float(sim.get("noise_sd", 0.01))
    grid = TimeGrid.uniform(t0, t1, dt)
    ss = np.random.SeedSequence(args.seed)
    s_path, s_obs = ss.spawn(2)
    path = sample_force_path(spec, t0, t1, float(sim.get("path_step", dt / 50)), s_path)
    if sim.get("x0", "identity") == "identity":
        X = simulate_fundamental(spec, path, grid)
        states = X.transpose(0, 2, 1).reshape(len(grid), -1)
    else:
        states = simulate_state(spec, path, sim["x0"], grid)
    obs = observe(states, noise_sd, s_obs, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "truth.csv", grid.times, states, path.at(grid.times))
    write_trajectory_csv(out / "observations.csv", grid.times, obs.values)
    print(f"wrote {out / 'truth.csv'} and {out / 'observations.csv'} ({len(grid)} times)")


def _observations(args, cfg):
    noise_sd = args.noise_sd
    if noise_sd is None:
        noise_sd = float(cfg.get("simulate", {}).get("noise_sd", 0.01))
    return read_observations_csv(args.data, noise_sd)


def cmd_fit_ag(args):
    cfg = _load(args.config)
    spec = _model(cfg)
    obs = _observations(args, cfg)
    settings = dict(cfg.get("ag", {}))
    noise_var = max(obs.noise_sd**2, 1e-8)
    if "state_hyp" in settings:
        hyps = [KernelHyp(float(h["amplitude_sq"]), float(h["lengthscale"]))
                for h in settings.pop("state_hyp")]
    else:
        hyps = [fit_hyperparams(obs.grid, obs.values[:, k], noise_var).hyp
                for k in range(obs.dim_state)]
    acfg = AGConfig(hyps, noise_var, **settings)
    res = ag_map(obs, spec, acfg, rng_seed=args.seed)
    result = {
        "method": "ag",
        "times": _tolist(obs.times),
        "X": _tolist(res.state.X.T),
        "g": _tolist(res.state.g),
        "beta": _tolist(res.state.beta),
        "trace": [float(v) for v in res.trace],
        "converged": res.converged,
        "n_iter": res.n_iter,
        "status": res.status,
        "seed": args.seed,
        "config": {"model": model_spec_to_dict(spec), "ag": acfg.to_dict(),
                   "noise_sd": obs.noise_sd},
        "version": __version__,
    }
    _dump(result, Path(args.out) / "fit_ag.json")
    print(f"AG fit: {res.status}, {res.n_iter} sweeps, objective {res.trace[-1]:.6g}")


def cmd_fit_mixsa(args):
    cfg = _load(args.config)
    spec = _model(cfg)
    obs = _observations(args, cfg)
    settings = dict(cfg.get("mixsa", {}))
    n_anchor = int(settings.pop("n_anchors", 2))
    settings.setdefault("anchors", equally_spaced_anchors(obs.grid, n_anchor))
    settings.setdefault("alpha_max", 1.0 / max(obs.noise_sd**2, 1e-8))
    mcfg = MixSAConfig(**settings)
    res = mixsa_em(obs, spec, mcfg, rng_seed=args.seed)
    fitted = res.cfg
    result = {
        "method": "mixsa",
        "times": _tolist(obs.times),
        "latent_times": _tolist(res.latent_times),
        "g": _tolist(res.g),
        "g_obs": _tolist(res.g_obs),
        "beta": _tolist(res.beta),
        "mu": _tolist(fitted.mu),
        "pi": _tolist(fitted.weights_pi),
        "alpha": float(fitted.alpha),
        "responsibilities": _tolist(res.responsibilities),
        "trace": [float(v) for v in res.trace],
        "converged": res.converged,
        "n_iter": res.n_iter,
        "status": res.status,
        "seed": args.seed,
        "config": {"model": model_spec_to_dict(spec), "mixsa": mcfg.to_dict(),
                   "noise_sd": obs.noise_sd},
        "version": __version__,
    }
    _dump(result, Path(args.out) / "fit_mixsa.json")
    print(f"MixSA fit: {res.status}, {res.n_iter} EM cycles, objective {res.trace[-1]:.6g}")


def cmd_experiment(args):
    raw = _load(args.config)
    if "experiment" in raw and isinstance(raw["experiment"], dict):
        raw = raw["experiment"]
    raw = dict(raw)
    raw["experiment"] = args.which
    cfg = experiment_config_from_dict(raw, base_seed=args.seed, n_reps=args.reps,
                                      n_jobs=args.jobs)
    if args.dt:
        cfg = replace(cfg, dts=tuple(args.dt))
    elif "dt" not in raw:
        cfg = replace(cfg, dts=DEFAULT_DTS)
    start = time.perf_counter()
    records = run_experiment(cfg)
    wall = time.perf_counter() - start
    rows = write_results(records, args.out, cfg, wall)
    for row in rows:
        label = row["method"] + (f" {row['setting']}" if row["setting"] else "")
        print(f"dt={row['dt']:<5g} {label:<16} mean={row['mean_error']:.4f} "
              f"sd={row['sd_error']:.4f} ok={row['n_ok']} failed={row['n_failed']}")
    print(f"{len(records)} records in {wall:.1f} s -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlfm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mlfm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", type=str, default=None, help="TOML or JSON config")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", type=str, default=".", help="output directory")
        p.add_argument("--reps", type=int, default=None, help="replications (experiments)")

    p = sub.add_parser("simulate", help="simulate a trajectory and noisy observations")
    common(p)
    p.set_defaults(func=cmd_simulate)

    fits = (("fit-ag", cmd_fit_ag, "adaptive gradient matching"),
            ("fit-mixsa", cmd_fit_mixsa, "mixture of successive approximations"))
    for name, func, label in fits:
        p = sub.add_parser(name, help=f"MAP fit by {label} to a trajectory CSV")
        common(p)
        p.add_argument("--data", required=True, help="CSV with columns t, x_1..x_K")
        p.add_argument("--noise-sd", type=float, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("experiment", help="run a seeded simulation study")
    p.add_argument("which", choices=["kubo", "so3"])
    common(p)
    p.add_argument("--dt", type=float, nargs="+", default=None,
                   help="observation spacings (default 0.5 1.0)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
