"""Command-line front end: ``transferop <command> [options]``.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a
numerical or solver error (a :class:`TransferOpError`) stops the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import statistics
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, io
from .analysis import export_clusters, spectral_cluster
from .config import DEFAULT_BETA, ConfigError, RunConfig, SystemSpec, load_config, parse_grid
from .dynamics import (
    SnapshotDataset,
    bickley_trajectories,
    builtin_potential,
    sample_grid,
    simulate_pairs,
)
from .ensemble import FitSpec, export_summary, fit_ensemble, fit_member
from .errors import TransferOpError
from .features import Distribution, sample_rfm
from .operators import SpectralModel, fit_iterative_basis

log = logging.getLogger("transferop")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3

# flag name -> (config key, type)
_FLAGS = {
    "system": ("system.name", str),
    "alpha": ("system.alpha", float),
    "beta": ("system.beta", float),
    "omega": ("system.omega", float),
    "m": ("data.m", int),
    "lag_time": ("data.lag_time", float),
    "lag_steps": ("data.lag_steps", int),
    "h": ("data.h", float),
    "burn_in": ("data.burn_in", int),
    "t0": ("data.t0", float),
    "t1": ("data.t1", float),
    "activation": ("model.activation", str),
    "n": ("model.n", int),
    "tol": ("model.tol", float),
    "mode": ("model.mode", str),
    "epochs": ("training.epochs", int),
    "step_size": ("training.step_size", float),
    "members": ("ensemble.members", int),
    "k": ("cluster.k", int),
    "repetitions": ("benchmark.repetitions", int),
}


class _Invalid(Exception):
    """Input problem detected by a command (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _thread_count(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("TRANSFEROP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"TRANSFEROP_THREADS must be an integer, got {env!r}") from None
    return 1


def _distribution(cfg: RunConfig):
    mc = cfg.model
    return Distribution(mc.distribution, mc.scale, mc.bias_scale, mc.fan_in_scaling)


def _potential(cfg: RunConfig):
    s = cfg.system
    if s.name == "ou":
        return builtin_potential("ou", alpha=s.alpha, beta=s.beta)
    if s.name == "lemon_slice":
        return builtin_potential("lemon_slice", n_wells=s.n_wells, beta=s.beta)
    if s.name == "triple_well":
        return builtin_potential("triple_well", beta=s.beta)
    if s.name == "qho":
        return builtin_potential("qho", omega=s.omega, mass=s.mass)
    return None


def _fit_spec(cfg: RunConfig):
    return FitSpec(cfg.model.mode, cfg.model.n, tuple(int(w) for w in cfg.model.widths), cfg.model.activation,
                   _distribution(cfg), cfg.model.tol, cfg.model.symmetrize,
                   _potential(cfg) if cfg.model.mode == "schrodinger" else None, cfg.system.hbar, cfg.system.mass)


def make_dataset(cfg: RunConfig) -> SnapshotDataset:
    """Generate the training data described by ``cfg``."""
    d = cfg.data
    name = cfg.system.name
    if name == "bickley":
        return bickley_trajectories(d.m, d.t0, d.t1, d.flow_h, d.seed)
    if name == "qho":
        return sample_grid(d.domain, d.m, d.sampling, d.seed)
    return simulate_pairs(_potential(cfg), d.m, cfg.lag_steps(), d.h, d.seed, d.burn_in, d.stride or None)


def _config_for_system(cfg: RunConfig, name: str) -> RunConfig:
    """Copy of ``cfg`` for another system; that system keeps its default parameters."""
    if name == cfg.system.name:
        return cfg
    return dataclasses.replace(cfg, system=SystemSpec(name=name, beta=DEFAULT_BETA.get(name, 1.0)))


def _grid_points(spec):
    axes = [np.linspace(lo, hi, n) for lo, hi, n in parse_grid(spec)]
    return np.vstack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")])


def _load_dataset(path):
    if path is None:
        raise _Invalid("--data DIR is required for this command")
    try:
        return SnapshotDataset.load(path)
    except OSError as exc:
        raise _Invalid(f"cannot read dataset {path}: {exc}") from exc


def _load_model(path):
    if path is None:
        raise _Invalid("--model PATH is required for this command")
    try:
        return SpectralModel.load(path)
    except OSError as exc:
        raise _Invalid(f"cannot read model {path}: {exc}") from exc


def _report(args, cfg, command, timings, artifacts, **extra):
    timings = {k: max(0.0, float(v)) for k, v in timings.items()}
    rep = {
        "command": command,
        "version": __version__,
        "config": cfg.as_dict(),
        "timings": timings,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        **extra,
    }
    path = Path(cfg.output.dir) / f"{command}_report.json"
    io.write_json(path, rep)
    return rep


def _fit_timed(cfg, data, spec):
    timings = {}
    t0 = time.perf_counter()
    model = fit_member(data, spec, cfg.model.seed, timings)
    total = time.perf_counter() - t0
    timings["solve"] = total - timings.get("featurize", 0.0) - timings.get("covariances", 0.0)
    timings["total"] = total
    return model, timings


def _iterative(cfg, data):
    rfm = sample_rfm(data.dim, cfg.model.widths, cfg.model.activation, _distribution(cfg), cfg.model.seed)
    t = cfg.training
    return fit_iterative_basis(rfm, data, cfg.model.n, t.epochs, t.step_size, t.seed, cfg.model.tol,
                               t.output_activation, t.optimizer)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_simulate(args, cfg):
    t0 = time.perf_counter()
    data = make_dataset(cfg)
    elapsed = time.perf_counter() - t0
    out = Path(cfg.output.dir)
    data.save(out)
    tau = "n/a" if data.lag_time is None else f"{data.lag_time:g}"
    print(f"simulated {cfg.system.name}: m={data.m} d={data.dim} tau={tau} -> {out}")
    _report(args, cfg, "simulate", {"simulate": elapsed, "total": elapsed}, {"dataset": out},
            m=data.m, d=data.dim, lag_time=data.lag_time, seed=cfg.data.seed)


def cmd_fit(args, cfg):
    data = _load_dataset(args.data)
    model, timings = _fit_timed(cfg, data, _fit_spec(cfg))
    path = Path(cfg.output.dir) / "model.spm"
    model.save(path)
    print(f"{model.mode} values: " + " ".join(f"{v:.6g}" for v in model.values))
    print(f"fit time {timings['total']:.3f} s -> {path}")
    _report(args, cfg, "fit", timings, {"model": path}, mode=model.mode, values=model.values,
            seed=cfg.model.seed)


def cmd_fit_iterative(args, cfg):
    data = _load_dataset(args.data)
    t0 = time.perf_counter()
    trained = _iterative(cfg, data)
    total = time.perf_counter() - t0
    path = Path(cfg.output.dir) / "model.spm"
    trained.model.save(path)
    print("koopman_eigen values: " + " ".join(f"{v:.6g}" for v in trained.model.values))
    print(f"{cfg.training.epochs} epochs in {total:.3f} s, final loss {trained.loss_history[-1]:.6g} -> {path}")
    _report(args, cfg, "fit-iterative", {"total": total}, {"model": path}, mode="koopman_eigen",
            values=trained.model.values, loss_history=trained.loss_history, seed=cfg.model.seed)


def cmd_ensemble(args, cfg):
    data = _load_dataset(args.data)
    grid = args.grid or cfg.ensemble.grid
    points = _grid_points(grid) if grid else data.X
    if points.shape[0] != data.dim:
        raise _Invalid(f"evaluation grid has dimension {points.shape[0]}, data has {data.dim}")
    t0 = time.perf_counter()
    summary = fit_ensemble(data, _fit_spec(cfg), cfg.ensemble.members, cfg.ensemble.base_seed, points,
                           n_threads=args.n_threads, bootstrap=cfg.ensemble.bootstrap)
    total = time.perf_counter() - t0
    out = Path(cfg.output.dir)
    export_summary(summary, points, out / "ensemble.csv", out / "ensemble.json")
    print(f"{summary.member_count} members; value means " + " ".join(f"{v:.6g}" for v in summary.values_mean))
    print("value std " + " ".join(f"{v:.3g}" for v in summary.values_std))
    _report(args, cfg, "ensemble", {"total": total}, {"csv": out / "ensemble.csv", "json": out / "ensemble.json"},
            values_mean=summary.values_mean, values_std=summary.values_std, failures=summary.failures)


def cmd_eval(args, cfg):
    model = _load_model(args.model)
    if args.grid:
        X = _grid_points(args.grid)
    elif args.data:
        X = _load_dataset(args.data).X
    else:
        raise _Invalid("eval needs --grid or --data")
    if X.shape[0] != model.rfm.input_dim:
        raise _Invalid(f"points have dimension {X.shape[0]}, the model expects {model.rfm.input_dim}")
    F = model.evaluate(X)
    path = Path(cfg.output.dir) / "eval.csv"
    header = [f"x{j}" for j in range(X.shape[0])] + [f"phi{i}" for i in range(F.shape[0])]
    io.write_csv(path, header, (list(X[:, p]) + list(F[:, p]) for p in range(X.shape[1])))
    print(f"evaluated {F.shape[0]} functions at {X.shape[1]} points -> {path}")


def cmd_cluster(args, cfg):
    model = _load_model(args.model)
    data = _load_dataset(args.data)
    if data.dim != model.rfm.input_dim:
        raise _Invalid(f"dataset dimension {data.dim} does not match the model ({model.rfm.input_dim})")
    c = cfg.cluster
    t0 = time.perf_counter()
    res = spectral_cluster(model, data.X, c.k, c.include_first, c.seed, c.restarts, weighted=c.weighted,
                           n_threads=args.n_threads)
    total = time.perf_counter() - t0
    path = Path(cfg.output.dir) / "clusters.csv"
    export_clusters(path, data.X, res)
    counts = res.counts()
    print(f"k={c.k}: cluster sizes " + " ".join(str(int(x)) for x in counts) + f" -> {path}")
    _report(args, cfg, "cluster", {"total": total}, {"csv": path}, counts=counts, inertia=res.inertia)


def cmd_benchmark(args, cfg):
    rows = []
    reps = cfg.benchmark.repetitions
    for name in cfg.benchmark.systems:
        row = {"system": name, "closed_form_s": float("nan"), "iterative_s": float("nan"),
               "speedup": float("nan"), "error": ""}
        try:
            sub = _config_for_system(cfg, name)
            data = make_dataset(sub)
            closed, iterative = [], []
            for _ in range(reps):
                t0 = time.perf_counter()
                fit_member(data, _fit_spec(sub), sub.model.seed)
                closed.append(time.perf_counter() - t0)
            for _ in range(reps):
                t0 = time.perf_counter()
                _iterative(sub, data)
                iterative.append(time.perf_counter() - t0)
            row["closed_form_s"] = statistics.median(closed)
            row["iterative_s"] = statistics.median(iterative)
            row["speedup"] = row["iterative_s"] / row["closed_form_s"]
        except (TransferOpError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    out = Path(cfg.output.dir)
    lines = ["system,closed_form_s,iterative_s,speedup,error"]
    for r in rows:
        lines.append(f"{r['system']},{r['closed_form_s']:.17g},{r['iterative_s']:.17g},{r['speedup']:.17g},"
                     f"\"{r['error']}\"")
    io.atomic_write_text(out / "benchmark.csv", "\n".join(lines) + "\n")
    print(f"{'system':<14}{'closed form [s]':>17}{'iterative [s]':>16}{'speedup':>10}")
    for r in rows:
        print(f"{r['system']:<14}{r['closed_form_s']:>17.3f}{r['iterative_s']:>16.3f}{r['speedup']:>10.1f}"
              + (f"  {r['error']}" if r["error"] else ""))
    _report(args, cfg, "benchmark", {}, {"csv": out / "benchmark.csv"}, rows=rows, repetitions=reps)


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "fit-iterative": cmd_fit_iterative,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "cluster": cmd_cluster,
    "benchmark": cmd_benchmark,
}


_HELP = {
    "simulate": "generate a snapshot dataset for a built-in system",
    "fit": "closed-form spectral fit of a dataset (writes model.spm)",
    "fit-iterative": "train the output layer by gradient ascent on the trace loss",
    "ensemble": "fit many feature-map seeds and report means and variances",
    "eval": "evaluate a saved model on a grid",
    "cluster": "k-means on the leading functions of a saved model",
    "benchmark": "time closed-form against iterative fits",
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="TOML configuration file")
    g.add_argument("--seed", type=int, help="seed for every random stream of the command")
    g.add_argument("--out", help="output directory (output.dir)")
    g.add_argument("--threads", type=int, help="thread count (default: $TRANSFEROP_THREADS or 1)")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key (repeatable)")
    g.add_argument("-v", "--verbose", action="store_true")

    o = common.add_argument_group("configuration shortcuts")
    for flag, (key, typ) in _FLAGS.items():
        o.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, help=f"sets {key}")
    o.add_argument("--widths", help="comma-separated layer widths (model.widths)")
    o.add_argument("--no-symmetrize", action="store_true", help="keep C01 unsymmetrized (diagnostic)")
    o.add_argument("--drop-first", action="store_true", help="omit the first function when clustering")
    o.add_argument("--bootstrap", action="store_true", help="resample data per ensemble member")
    o.add_argument("--systems", help="comma-separated systems for benchmark")

    io_ = common.add_argument_group("inputs")
    io_.add_argument("--data", help="dataset directory")
    io_.add_argument("--model", help="model file (.spm)")
    io_.add_argument("--grid", help="evaluation grid lo:hi:n[,lo:hi:n]")

    parser = argparse.ArgumentParser(prog="transferop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"transferop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=_HELP[name])
    return parser


def _overrides(args):
    items = []
    for flag, (key, _) in _FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            items.append((key, v))
    if args.widths:
        try:
            items.append(("model.widths", [int(w) for w in args.widths.split(",")]))
        except ValueError:
            raise ConfigError(f"--widths must be comma-separated integers, got {args.widths!r}") from None
    if args.no_symmetrize:
        items.append(("model.symmetrize", False))
    if args.drop_first:
        items.append(("cluster.include_first", False))
    if args.bootstrap:
        items.append(("ensemble.bootstrap", True))
    if args.systems:
        items.append(("benchmark.systems", [s.strip() for s in args.systems.split(",")]))
    if args.seed is not None:
        for key in ("data.seed", "model.seed", "training.seed", "ensemble.base_seed", "cluster.seed"):
            items.append((key, args.seed))
    if args.out:
        items.append(("output.dir", args.out))
    return list(args.set) + items


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        args.n_threads = _thread_count(args)
        if args.n_threads < 1:
            raise ConfigError("--threads must be at least 1")
        try:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(args.n_threads)
        except ImportError:  # pragma: no cover
            limits = nullcontext()
        with limits:
            _COMMANDS[args.command](args, cfg)
    except (ConfigError, _Invalid) as exc:
        print(f"transferop {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TransferOpError as exc:
        print(f"transferop {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"transferop {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
