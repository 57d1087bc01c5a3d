"""Command-line front end.

Every command writes its outputs into ``--out`` together with a
``manifest.json`` listing the artifacts and their SHA-256 digests.

Exit codes: 0 success, 2 input or schema error, 3 numerical or convergence
failure, 4 population cap exceeded.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from .core import (
    CALIBRATED,
    PARAMETER_NAMES,
    ConditioningError,
    ConfigError,
    IntegrationError,
    ParameterVector,
    PopulationCapError,
    SimConfig,
    exploration_bounds,
    group_parameters,
    load_config,
    prior_bounds,
)
from .lifecycle import run_simulation, write_rows
from .measure import aggregate_rows, measure, measure_trace, spheroid_rows
from .pipeline import derived_seed, sweep
from .stats import select_and_run, write_reports
from .surrogate import GPModel, fit, q2, read_training_csv, write_training_csv
from .uq import mcmc_sample, read_observations, sobol_indices

log = logging.getLogger("spheroidsim")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4
THREADS_ENV = "SPHEROIDSIM_THREADS"
RHAT_MAX = 1.05


class ConvergenceFailure(RuntimeError):
    """Raised after outputs are written when MCMC diagnostics fail."""


# ----------------------------------------------------------------- helpers

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, artifacts, seed, started, config_digest="",
                    inputs=()):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config_digest": config_digest,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifacts": {Path(a).name: _sha256(a) for a in artifacts},
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_params(path) -> ParameterVector:
    """Parameters from a YAML file (a ``parameters`` section or a bare mapping)."""
    import yaml
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed parameter file: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping of parameter values")
    doc = doc.get("parameters", doc)
    try:
        return ParameterVector.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _setup(args):
    """(config, params) from --config, --params/--group and --seed."""
    if args.config:
        config, params = load_config(args.config)
    else:
        config, params = SimConfig(), None
    if getattr(args, "params", None):
        params = _read_params(args.params)
    elif getattr(args, "group", None):
        params = group_parameters(args.group)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    overrides = {k: v for k, v in (("mechanics_dt", getattr(args, "dt", None)),
                                   ("collagen_density", getattr(args, "density", None)))
                 if v is not None}
    if overrides:
        config = SimConfig.from_dict({**config.as_dict(), **overrides})
    return config, params or ParameterVector()


def _threads(args) -> int:
    n = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _gp_day(path) -> int:
    m = re.search(r"day(\d+)", Path(path).stem)
    if not m:
        raise ConfigError(f"{path}: cannot infer the day from the file name (expected ...day<N>.json)")
    return int(m.group(1))


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    started = time.perf_counter()
    config, params = _setup(args)
    out = _out_dir(args.out)
    agg, sph, artifacts = [], [], []
    for r in range(args.replicates):
        cfg = config if args.replicates == 1 else config.replace(seed=derived_seed(config.seed, 0, r))
        trace = run_simulation(cfg, params)
        reports = measure_trace(trace)
        morph = {row["day"]: row for row in aggregate_rows(reports, r)}
        for row in trace.daily_table():
            extra = {k: v for k, v in morph[row["day"]].items() if k not in ("day", "n_cells")}
            agg.append({"replicate": r, "day": row["day"], **{k: v for k, v in row.items() if k != "day"},
                        **{k: v for k, v in extra.items() if k != "replicate"}})
        sph.extend(spheroid_rows(reports, r))
        suffix = "" if args.replicates == 1 else f"_rep{r}"
        trace.write_cells_csv(out / f"cells{suffix}.csv")
        trace.write_events_csv(out / f"events{suffix}.csv")
        artifacts += [out / f"cells{suffix}.csv", out / f"events{suffix}.csv"]
    write_rows(out / "aggregates.csv", agg)
    write_rows(out / "spheroids.csv", sph,
               header=["replicate", "day", "spheroid", "n_cells", "area_um2",
                       "volume_per_cell_um3", "volume_fallback"])
    (out / "run_config.json").write_text(
        json.dumps({"simulation": config.as_dict(), "parameters": params.as_dict()},
                   indent=1, sort_keys=True) + "\n")
    artifacts = [out / "aggregates.csv", out / "spheroids.csv", out / "run_config.json", *artifacts]
    inputs = [p for p in (args.config, args.params) if p]
    _write_manifest(out, "simulate", artifacts, config.seed, started, config.digest(), inputs)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    config, base = _setup(args)
    names = tuple(args.names) if args.names else PARAMETER_NAMES
    unknown = set(names) - set(PARAMETER_NAMES)
    if unknown:
        raise ConfigError(f"unknown parameters: {sorted(unknown)}")
    bounds = exploration_bounds(names)
    out = _out_dir(args.out)
    ck = out / "sweep_checkpoint.jsonl"
    res = sweep(config, names, bounds, args.n, replicates=args.replicates, seed=config.seed,
                base=base, checkpoint=ck, workers=_threads(args))
    xs, ds, ys, fs = res.rows()
    days = set(args.days) if args.days else None
    keep = [k for k in range(len(ds)) if days is None or ds[k] in days]
    write_training_csv(out / "training.csv", names, [xs[k] for k in keep], [ds[k] for k in keep],
                       [ys[k] for k in keep], [fs[k] for k in keep])
    if res.failed.any():
        log.warning("%d of %d samples failed and are flagged", int(res.failed.sum()), args.n)
    _write_manifest(out, "sweep", [out / "training.csv", ck], config.seed, started,
                    config.digest(), [p for p in (args.config, args.params) if p])
    return EXIT_OK


def cmd_gp_train(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    path = Path(args.training)
    if not path.exists():
        raise FileNotFoundError(f"training file not found: {path}")
    _, all_days = read_training_csv(path)
    days = args.days or sorted(set(int(d) for d in all_days) - {0})
    artifacts, summary = [], {}
    for d in days:
        data, _ = read_training_csv(path, day=d)
        model = fit(data, restarts=args.restarts, seed=args.seed)
        target = out / f"gp_day{d}.json"
        model.save(target)
        artifacts.append(target)
        summary[d] = {"log_likelihood": model.log_likelihood,
                      "lengthscales": model.lengthscales.tolist(), "noise": model.noise}
        if args.test:
            test, _ = read_training_csv(args.test, day=d, bounds=data.bounds)
            summary[d]["q2"] = q2(model, test.inputs, test.outputs)
    (out / "gp_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    inputs = [path, *([args.test] if args.test else [])]
    _write_manifest(out, "gp-train", [*artifacts, out / "gp_summary.json"], args.seed, started,
                    inputs=inputs)
    return EXIT_OK


def cmd_sobol(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    if not Path(args.gp).exists():
        raise FileNotFoundError(f"model file not found: {args.gp}")
    model = GPModel.load(args.gp)
    if args.n < 1024 or args.n & (args.n - 1):
        raise ConfigError("--n must be a power of two of at least 1024")
    res = sobol_indices(model, N=args.n, rng=args.seed, names=model.data.names)
    res.write_csv(out / "sobol.csv")
    _write_manifest(out, "sobol", [out / "sobol.csv"], args.seed, started, inputs=[args.gp])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    for p in [args.obs, *args.gp]:
        if not Path(p).exists():
            raise FileNotFoundError(f"file not found: {p}")
    obs = read_observations(args.obs)
    models = {_gp_day(p): GPModel.load(p) for p in args.gp}
    names = tuple(next(iter(models.values())).data.names)
    if any(tuple(m.data.names) != names for m in models.values()):
        raise ConfigError("all emulators must share the same input parameters")
    if not set(names) <= set(CALIBRATED):
        raise ConfigError(f"emulator inputs {names} are not calibrated parameters {CALIBRATED}")
    priors = prior_bounds(names)
    artifacts, failed = [], []
    for k, (group, ob) in enumerate(sorted(obs.items())):
        missing = sorted(set(int(d) for d in ob.days) - set(models))
        if missing:
            raise ConfigError(f"group {group!r}: no emulator for day(s) {missing}")
        post = mcmc_sample(ob, models, priors, chains=args.chains, draws=args.draws,
                           burn_in=args.burn_in, seed=derived_seed(args.seed, k), names=names)
        post.write_csv(out / f"posterior_{group}.csv")
        rep = post.report()
        rep["group"] = group
        rep["rhat_max"] = args.rhat_max
        rep["converged"] = bool(np.all(post.rhat < args.rhat_max))
        (out / f"map_{group}.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
        artifacts += [out / f"posterior_{group}.csv", out / f"map_{group}.json"]
        if not rep["converged"]:
            failed.append(group)
    _write_manifest(out, "calibrate", artifacts, args.seed, started, inputs=[args.obs, *args.gp])
    if failed:
        raise ConvergenceFailure(f"split-Rhat >= {args.rhat_max} for group(s) {', '.join(failed)}")
    return EXIT_OK


def _read_cells(path) -> dict:
    """Snapshots from a cells CSV written by ``simulate``, keyed by day."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"day", "id", "x_um", "y_um", "z_um", "state"}
    if not rows or not need <= set(rows[0]):
        raise ConfigError(f"{path}: expected columns {sorted(need)}")
    states = {"proliferating": 0, "quiescent": 1, "apoptotic": 2}
    by: dict = {}
    for r in rows:
        by.setdefault(int(r["day"]), []).append(r)
    snaps = {}
    for d, rs in sorted(by.items()):
        try:
            st = np.array([states[r["state"]] for r in rs], dtype=np.int8)
        except KeyError as exc:
            raise ConfigError(f"{path}: unknown cell state {exc}") from None
        snaps[d] = SimpleNamespace(
            ids=np.array([int(r["id"]) for r in rs], dtype=np.int64),
            positions=np.array([[float(r["x_um"]), float(r["y_um"]), float(r["z_um"])] for r in rs]),
            states=st)
    return snaps


def cmd_measure(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    if not Path(args.cells).exists():
        raise FileNotFoundError(f"cells file not found: {args.cells}")
    reports = {d: measure(s, link_distance=args.link_distance, pixel=args.pixel)
               for d, s in _read_cells(args.cells).items()}
    write_rows(out / "morphology.csv", aggregate_rows(reports))
    write_rows(out / "spheroids.csv", spheroid_rows(reports),
               header=["replicate", "day", "spheroid", "n_cells", "area_um2",
                       "volume_per_cell_um3", "volume_fallback"])
    _write_manifest(out, "measure", [out / "morphology.csv", out / "spheroids.csv"], None,
                    started, inputs=[args.cells])
    return EXIT_OK


_NOT_METRICS = {"replicate", "day", "time_min"}


def _read_metrics(path, day):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = [c for c in (reader.fieldnames or []) if c not in _NOT_METRICS]
    if not rows or "day" not in rows[0]:
        raise ConfigError(f"{path}: expected a metrics CSV with a 'day' column")
    sel = [r for r in rows if int(r["day"]) == day]
    if not sel:
        raise ConfigError(f"{path}: no rows for day {day}")
    return cols, {c: np.array([float(r[c]) for r in sel]) for c in cols}


def cmd_compare(args) -> int:
    started = time.perf_counter()
    if len(args.files) < 2:
        raise ConfigError("compare needs at least two scenario files")
    out = _out_dir(args.out)
    for p in args.files:
        if not Path(p).exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
    labels = args.labels or [Path(p).parent.name if Path(p).name == "aggregates.csv" else Path(p).stem
                             for p in args.files]
    if len(labels) != len(args.files) or len(set(labels)) != len(labels):
        raise ConfigError("scenario labels must be unique, one per file")
    loaded = [_read_metrics(p, args.day) for p in args.files]
    cols = loaded[0][0]
    for (c, _), p in zip(loaded[1:], args.files[1:]):
        if c != cols:
            raise ConfigError(f"{p}: metric columns differ from {args.files[0]}")
    metrics = args.metrics or cols
    reports = {}
    for m in metrics:
        if m not in cols:
            raise ConfigError(f"unknown metric {m!r}")
        try:
            reports[m] = select_and_run({lab: data[m] for lab, (_, data) in zip(labels, loaded)},
                                        alpha=args.alpha)
        except ValueError as exc:
            log.warning("metric %s skipped: %s", m, exc)
    write_reports(out / "comparison.csv", reports)
    _write_manifest(out, "compare", [out / "comparison.csv"], None, started, inputs=args.files)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spheroidsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker count (default: ${THREADS_ENV} or 1)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    def sim_inputs(sp):
        sp.add_argument("--config", help="YAML run configuration")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--params", help="YAML parameter file")
        g.add_argument("--group", choices=["large", "medium", "small"],
                       help="calibrated parameter set")
        sp.add_argument("--dt", type=float, help="override the mechanics timestep (min)")
        sp.add_argument("--density", type=float, help="override the collagen density (mg/ml)")

    sp = sub.add_parser("simulate", help="run the agent-based model")
    sim_inputs(sp)
    sp.add_argument("--replicates", type=int, default=1)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="Latin-hypercube sweep for emulator training")
    sim_inputs(sp)
    sp.add_argument("--n", type=int, required=True, help="number of parameter samples")
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--names", nargs="+", help="parameters to vary (default: all)")
    sp.add_argument("--days", type=int, nargs="+", help="days to keep (default: all)")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gp-train", help="fit one emulator per day")
    sp.add_argument("--training", required=True)
    sp.add_argument("--test", help="held-out CSV for Q2")
    sp.add_argument("--days", type=int, nargs="+")
    sp.add_argument("--restarts", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_gp_train)

    sp = sub.add_parser("sobol", help="Sobol indices of a trained emulator")
    sp.add_argument("--gp", required=True)
    sp.add_argument("--n", type=int, default=2**12, help="base sample size (power of two)")
    common(sp)
    sp.set_defaults(func=cmd_sobol)

    sp = sub.add_parser("calibrate", help="MCMC posterior per observation group")
    sp.add_argument("--obs", required=True, help="CSV with group, day, area_um2")
    sp.add_argument("--gp", nargs="+", required=True, help="emulator files named ...day<N>.json")
    sp.add_argument("--chains", type=int, default=4)
    sp.add_argument("--draws", type=int, default=20000)
    sp.add_argument("--burn-in", type=int, default=10000)
    sp.add_argument("--rhat-max", type=float, default=RHAT_MAX)
    common(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("measure", help="morphology of a cells CSV")
    sp.add_argument("--cells", required=True)
    sp.add_argument("--link-distance", type=float, default=13.5)
    sp.add_argument("--pixel", type=float, default=0.5)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_measure)

    sp = sub.add_parser("compare", help="routed group tests across scenarios")
    sp.add_argument("files", nargs="+", help="aggregate CSVs, one per scenario")
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--day", type=int, default=7)
    sp.add_argument("--metrics", nargs="+")
    sp.add_argument("--alpha", type=float, default=0.05)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is None and args.command in ("gp-train", "sobol", "calibrate"):
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IntegrationError, ConditioningError, ConvergenceFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PopulationCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP


if __name__ == "__main__":
    sys.exit(main())
