"""Batch helpers shared by the command line and the acceptance tests.

Replicate runs, Latin-hypercube sweeps that build emulator training data
(with a resumable checkpoint), and per-day emulator training.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    IntegrationError,
    ParameterVector,
    PopulationCapError,
    SimConfig,
)
from .lifecycle import run_simulation
from .measure import measure_trace
from .surrogate import TrainingSet, fit, latin_hypercube

log = logging.getLogger(__name__)

SWEEP_RESPONSE = "mean_area_um2"


def derived_seed(base: int, *keys: int) -> int:
    """Independent 32-bit seed for a (base, keys...) coordinate."""
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


def run_replicates(config: SimConfig, params: ParameterVector, replicates: int, seed: int = 0,
                   volume: bool = True, stream: int = 0) -> list[dict]:
    """Aggregate morphology rows (one per replicate and day).

    Replicate r uses seed ``derived_seed(seed, stream, r)``, so scenarios that
    share ``seed`` and ``stream`` also share division histories.
    """
    rows = []
    for r in range(replicates):
        cfg = config.replace(seed=derived_seed(seed, stream, r))
        trace = run_simulation(cfg, params)
        for day, rep in sorted(measure_trace(trace, volume=volume).items()):
            rows.append({"replicate": r, "day": day, **rep.summary()})
    return rows


def metric_at(rows, metric: str, day: int) -> np.ndarray:
    return np.array([r[metric] for r in rows if r["day"] == day], dtype=float)


@dataclass
class SweepResult:
    names: tuple
    bounds: np.ndarray
    inputs: np.ndarray      # (n, J)
    days: np.ndarray        # (D,)
    areas: np.ndarray       # (n, D), NaN where failed
    failed: np.ndarray      # (n,) bool

    def training_set(self, day: int) -> TrainingSet:
        k = int(np.nonzero(self.days == day)[0][0])
        ok = ~self.failed
        return TrainingSet(self.inputs[ok], self.areas[ok, k], self.bounds, self.names)

    def rows(self):
        """Flattened (inputs, day, area, failed) rows, sample-major."""
        xs, ds, ys, fs = [], [], [], []
        for i in range(len(self.inputs)):
            for k, d in enumerate(self.days):
                xs.append(self.inputs[i])
                ds.append(int(d))
                ys.append(self.areas[i, k])
                fs.append(bool(self.failed[i]))
        return xs, ds, ys, fs


def _sweep_key(config, names, bounds, n, replicates, seed, base) -> str:
    blob = json.dumps({"config": config.as_dict(), "names": list(names),
                       "bounds": np.asarray(bounds).tolist(), "n": n,
                       "replicates": replicates, "seed": seed,
                       "base": base.as_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sweep_sample(task):
    config, params, i, seed, replicates, days = task
    out = np.full(len(days), np.nan)
    try:
        rows = run_replicates(config, params, replicates, seed=derived_seed(seed, 1), stream=i,
                              volume=False)
        for k, d in enumerate(days):
            out[k] = metric_at(rows, SWEEP_RESPONSE, int(d)).mean()
    except (PopulationCapError, IntegrationError) as exc:
        log.warning("sweep sample %d failed: %s", i, exc)
        return i, np.full(len(days), np.nan), True
    return i, out, False


def sweep(config: SimConfig, names, bounds, n: int, replicates: int = 1, seed: int = 0,
          base: ParameterVector | None = None, checkpoint=None,
          workers: int = 1) -> SweepResult:
    """Simulate ``n`` Latin-hypercube parameter samples and record daily areas.

    Parameters not in ``names`` keep their ``base`` values. Each sample's
    response is the replicate-averaged mean spheroid projected area (0 when
    the population died out). Samples that hit the population cap or fail
    numerically are flagged instead of aborting the sweep. With a
    ``checkpoint`` path finished samples are appended as JSON lines and
    skipped on a rerun with identical settings. ``workers`` > 1 fans samples
    out to processes; results do not depend on it.
    """
    if n < 2:
        raise ConfigError("a sweep needs at least two samples")
    names = tuple(names)
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    base = base or ParameterVector()
    x = latin_hypercube(n, bounds, seed=seed)
    days = np.arange(int(np.floor(config.duration / config.snapshot_interval + 1e-9)) + 1)
    areas = np.full((n, len(days)), np.nan)
    failed = np.zeros(n, dtype=bool)
    done = set()
    key = _sweep_key(config, names, bounds, n, replicates, seed, base)
    ck = Path(checkpoint) if checkpoint else None
    if ck and ck.exists():
        lines = ck.read_text().splitlines()
        if lines and json.loads(lines[0]).get("key") == key:
            for line in lines[1:]:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    break  # torn final line from an interrupted run
                i = rec["sample"]
                areas[i] = np.array(rec["areas"], dtype=float)
                failed[i] = rec["failed"]
                done.add(i)
        else:
            ck.unlink()
    if ck and not ck.exists():
        ck.write_text(json.dumps({"key": key}) + "\n")
    todo = []
    for i in range(n):
        if i not in done:
            params = base.with_values(**dict(zip(names, x[i].tolist())))
            todo.append((config, params, i, seed, replicates, days))
    if workers > 1 and len(todo) > 1:
        pool = ProcessPoolExecutor(workers)
        results = pool.map(_sweep_sample, todo)
    else:
        pool = None
        results = map(_sweep_sample, todo)
    try:
        for i, a, bad in results:  # in sample order, so the checkpoint is deterministic
            areas[i], failed[i] = a, bad
            if ck:
                with ck.open("a") as fh:
                    fh.write(json.dumps({"sample": i,
                                         "areas": [None if np.isnan(v) else float(v) for v in a],
                                         "failed": bool(bad)}) + "\n")
    finally:
        if pool is not None:
            pool.shutdown()
    return SweepResult(names, bounds, x, days, areas, failed)


def train_day_models(result: SweepResult, days=None, restarts: int = 5, seed: int = 0) -> dict:
    """One emulator per requested day (day 0 is constant and skipped by default)."""
    days = [int(d) for d in (days if days is not None else result.days[1:])]
    return {d: fit(result.training_set(d), restarts=restarts, seed=seed) for d in days}
