"""ATP-driven phenotype switching, division, death and the simulation driver.

The time loop advances in mechanics steps; each step integrates metabolism and
then moves cells. Every ``phenotype_dt`` cells flagged apoptotic at the
previous phenotype step are removed, the survivors are reclassified from
their ATP level, and proliferating cells attempt to divide (in id order).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import rng as _rng
from .core import (
    CellState,
    ConfigError,
    IntegrationError,
    ParameterVector,
    PhenotypeParams,
    PopulationCapError,
    SimConfig,
)
from .mechanics import advance, reflect, step_positions
from .metabolism import (
    SPECIES,
    MetabolicState,
    _k_array,
    initial_state,
    integrate,
    n_substeps,
)

DAY = 1440.0


@dataclass
class CellAgent:
    id: int
    position: np.ndarray
    radius: float = 6.0
    state: CellState = CellState.QUIESCENT
    metabolic: MetabolicState = field(default_factory=MetabolicState)


def classify(atp: float, thresholds: PhenotypeParams) -> CellState:
    """Strictly below atp_death dies; at or above atp_prolif proliferates."""
    if atp < thresholds.atp_death:
        return CellState.APOPTOTIC
    if atp >= thresholds.atp_prolif:
        return CellState.PROLIFERATING
    return CellState.QUIESCENT


def classify_array(atp, thresholds: PhenotypeParams) -> np.ndarray:
    atp = np.asarray(atp, dtype=float)
    out = np.full(atp.shape, int(CellState.QUIESCENT), dtype=np.int8)
    out[atp >= thresholds.atp_prolif] = int(CellState.PROLIFERATING)
    out[atp < thresholds.atp_death] = int(CellState.APOPTOTIC)
    return out


def _check_division_prob(k_prolif, dt):
    if not k_prolif * dt < 0.1:
        raise ValueError(f"division probability k_prolif*dt = {k_prolif * dt:g} must stay below 0.1")


def attempt_division(cell: CellAgent, k_prolif: float, dt: float, stream, counter: int,
                     new_id: int) -> CellAgent | None:
    """Bernoulli division with probability k_prolif*dt.

    The daughter sits one radius from the parent in a random direction and
    copies the parent's metabolic state.
    """
    _check_division_prob(k_prolif, dt)
    if CellState(cell.state) != CellState.PROLIFERATING:
        return None
    if not stream.uniform(cell.id, _rng.DIVISION, counter) < k_prolif * dt:
        return None
    u = stream.direction(cell.id, _rng.DAUGHTER, counter)
    return CellAgent(new_id, np.asarray(cell.position, float) + cell.radius * u,
                     cell.radius, cell.state, cell.metabolic)


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # "division" or "death"
    cell_id: int
    parent_id: int = -1


def apply_death(cells, time: float = 0.0, events: list | None = None):
    """Drop apoptotic cells, appending a death event for each to ``events``."""
    out = []
    for c in cells:
        if CellState(c.state) == CellState.APOPTOTIC:
            if events is not None:
                events.append(Event(time, "death", c.id))
        else:
            out.append(c)
    return out


@dataclass(frozen=True)
class Snapshot:
    time: float
    ids: np.ndarray
    positions: np.ndarray
    states: np.ndarray
    atp: np.ndarray

    @property
    def day(self) -> int:
        return int(round(self.time / DAY))

    @property
    def living(self) -> np.ndarray:
        return self.states != int(CellState.APOPTOTIC)

    def count(self, state: CellState) -> int:
        return int(np.sum(self.states == int(state)))


@dataclass
class SimulationTrace:
    config: SimConfig
    params: ParameterVector
    snapshots: list = field(default_factory=list)
    events: list = field(default_factory=list)
    initial_count: int = 0

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]

    def n_divisions(self, until: float = np.inf) -> int:
        return sum(1 for e in self.events if e.kind == "division" and e.time <= until)

    def n_deaths(self, until: float = np.inf) -> int:
        return sum(1 for e in self.events if e.kind == "death" and e.time <= until)

    def daily_table(self) -> list[dict]:
        rows = []
        for s in self.snapshots:
            atp = s.atp[s.living]
            rows.append({
                "day": s.day,
                "time_min": s.time,
                "n_cells": int(s.living.sum()),
                "n_proliferating": s.count(CellState.PROLIFERATING),
                "n_quiescent": s.count(CellState.QUIESCENT),
                "n_apoptotic": s.count(CellState.APOPTOTIC),
                "divisions": self.n_divisions(s.time),
                "deaths": self.n_deaths(s.time),
                "mean_atp": float(atp.mean()) if atp.size else 0.0,
            })
        return rows

    def write_aggregates_csv(self, path, extra: dict | None = None):
        """One row per snapshot; ``extra`` maps day -> additional columns."""
        rows = self.daily_table()
        for r in rows:
            r.update((extra or {}).get(r["day"], {}))
        write_rows(path, rows)

    def write_cells_csv(self, path):
        rows = []
        for s in self.snapshots:
            for k in range(len(s.ids)):
                rows.append({
                    "day": s.day, "id": int(s.ids[k]),
                    "x_um": s.positions[k, 0], "y_um": s.positions[k, 1], "z_um": s.positions[k, 2],
                    "state": CellState(int(s.states[k])).name.lower(), "atp": s.atp[k],
                })
        write_rows(path, rows, header=["day", "id", "x_um", "y_um", "z_um", "state", "atp"])

    def write_events_csv(self, path):
        write_rows(path, [e.__dict__ for e in self.events],
                   header=["time", "kind", "cell_id", "parent_id"])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_rows(path, rows, header=None):
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


# --------------------------------------------------------------- simulation

def _initial_positions(config: SimConfig) -> np.ndarray:
    n = config.initial_cells
    pos = np.zeros((n, 3))
    if config.initial_spread > 0:
        stream = _rng.RngStream(config.seed)
        for i in range(n):
            rad = config.initial_spread * stream.uniform(i, _rng.PLACEMENT, 0, 3) ** (1 / 3)
            pos[i] = rad * stream.direction(i, _rng.PLACEMENT, 0, 0)
    return pos


def _initial_metabolic(config: SimConfig, params: ParameterVector) -> MetabolicState:
    ph = params.phenotype
    atp = config.initial_atp
    if atp is None:
        atp = 0.5 * (ph.atp_death + ph.atp_prolif)
    return initial_state(config.glu_supply, config.o2_supply, config.nad_total, atp)


@nb.njit(cache=True)
def _division_draws(seed, ids, states, counter, prob, radius):
    n = ids.shape[0]
    parents = []
    for i in range(n):
        if states[i] == 0 and _rng.uniform01(seed, ids[i], _rng.DIVISION, counter, 0) < prob:
            parents.append(i)
    offs = np.empty((len(parents), 3))
    par = np.empty(len(parents), dtype=np.int64)
    for m in range(len(parents)):
        i = parents[m]
        u = _rng.unit_vector(seed, ids[i], _rng.DAUGHTER, counter, 0)
        par[m] = i
        for a in range(3):
            offs[m, a] = radius * u[a]
    return par, offs


def _steps(config: SimConfig):
    per_pheno = int(round(config.phenotype_dt / config.mechanics_dt))
    n_pheno = int(np.floor(config.duration / config.phenotype_dt + 1e-9))
    per_snap = int(round(config.snapshot_interval / config.phenotype_dt))
    return per_pheno, n_pheno, per_snap


def run_simulation(config: SimConfig, params: ParameterVector) -> SimulationTrace:
    """Simulate one spheroid from ``config.initial_cells`` cells."""
    mech = config.mechanical()
    ph = params.phenotype
    dt = config.mechanics_dt
    _check_division_prob(ph.k_prolif, config.phenotype_dt)
    per_pheno, n_pheno, per_snap = _steps(config)

    n0 = config.initial_cells
    pos = _initial_positions(config)
    ids = np.arange(n0, dtype=np.int64)
    next_id = n0
    loc = np.zeros((n0, 3))
    loc_live = np.zeros(n0, dtype=np.bool_)
    pool = _initial_metabolic(config, params).as_array()[None, :].copy()
    pool_idx = np.zeros(n0, dtype=np.int64)
    states = classify_array(pool[pool_idx, 6], ph)

    trace = SimulationTrace(config, params, initial_count=n0)
    events = trace.events

    def snap(t):
        trace.snapshots.append(Snapshot(t, ids.copy(), pos.copy(), states.copy(),
                                        pool[pool_idx, 6].copy()))

    snap(0.0)
    kvec = _k_array(params.metabolic)
    nsub = n_substeps(dt, config.metabolic_substep)
    switch = min(1.0, dt / config.persistence_time)
    prob = ph.k_prolif * config.phenotype_dt
    for p in range(1, n_pheno + 1):
        bad_row, bad_sp = advance(
            pos, states, ids, loc, loc_live, pool, per_pheno, (p - 1) * per_pheno, dt,
            mech.c_cca, mech.c_ccr, mech.adhesion_range, mech.contact_range, mech.drag,
            config.domain_half_extent, config.locomotion_scale, switch,
            config.seed, kvec, nsub, config.glu_supply, config.o2_supply,
        )
        if bad_row >= 0:
            raise IntegrationError(f"non-finite {SPECIES[bad_sp]} in metabolic state")
        t = p * config.phenotype_dt
        dead = states == int(CellState.APOPTOTIC)
        if dead.any():
            for cid in ids[dead]:
                events.append(Event(t, "death", int(cid)))
            keep = ~dead
            pos, ids, loc, loc_live, pool_idx = pos[keep], ids[keep], loc[keep], loc_live[keep], pool_idx[keep]
        states = classify_array(pool[pool_idx, 6], ph)
        par, offs = _division_draws(config.seed, ids, states, p, prob, mech.radius)
        if len(par):
            if len(ids) + len(par) > config.population_cap:
                raise PopulationCapError(
                    f"population {len(ids) + len(par)} exceeds the cap of {config.population_cap} cells"
                )
            new_ids = np.arange(next_id, next_id + len(par), dtype=np.int64)
            next_id += len(par)
            for cid, parent in zip(new_ids, ids[par]):
                events.append(Event(t, "division", int(cid), int(parent)))
            daughters = reflect(pos[par] + offs, config.domain_half_extent)
            pos = np.concatenate([pos, daughters])
            ids = np.concatenate([ids, new_ids])
            states = np.concatenate([states, states[par]])
            loc = np.concatenate([loc, np.zeros((len(par), 3))])
            loc_live = np.concatenate([loc_live, np.zeros(len(par), dtype=np.bool_)])
            pool_idx = np.concatenate([pool_idx, pool_idx[par]])
        if p % per_snap == 0:
            snap(t)
    return trace


def run_reference(config: SimConfig, params: ParameterVector) -> SimulationTrace:
    """Slow object-based driver mirroring :func:`run_simulation` step by step.

    Every cell integrates its own metabolism and forces are summed over all
    pairs. Locomotion is redrawn every step, so this matches the compiled
    driver only when ``persistence_time <= mechanics_dt``.
    """
    if config.persistence_time > config.mechanics_dt:
        raise ConfigError("reference driver requires persistence_time <= mechanics_dt")
    mech = config.mechanical()
    ph = params.phenotype
    stream = _rng.RngStream(config.seed)
    dt = config.mechanics_dt
    per_pheno, n_pheno, per_snap = _steps(config)
    m0 = _initial_metabolic(config, params)
    cells = [CellAgent(i, x, mech.radius, classify(m0.atp, ph), m0)
             for i, x in enumerate(_initial_positions(config))]
    next_id = len(cells)
    trace = SimulationTrace(config, params, initial_count=len(cells))

    def snap(t):
        trace.snapshots.append(Snapshot(
            t, np.array([c.id for c in cells], dtype=np.int64),
            np.array([c.position for c in cells], dtype=float).reshape(-1, 3),
            np.array([int(c.state) for c in cells], dtype=np.int8),
            np.array([c.metabolic.atp for c in cells], dtype=float)))

    snap(0.0)
    step = 0
    for p in range(1, n_pheno + 1):
        for _ in range(per_pheno):
            for c in cells:
                c.metabolic = integrate(c.metabolic, params.metabolic, dt, config.metabolic_substep,
                                        config.glu_supply, config.o2_supply)
            new = step_positions(cells, mech, dt, stream, step, config.locomotion_scale,
                                 config.domain_half_extent)
            for c, x in zip(cells, new):
                c.position = x
            step += 1
        t = p * config.phenotype_dt
        cells = apply_death(cells, t, trace.events)
        for c in cells:
            c.state = classify(c.metabolic.atp, ph)
        born = []
        for c in cells:
            d = attempt_division(c, ph.k_prolif, config.phenotype_dt, stream, p, next_id)
            if d is not None:
                d.position = reflect(d.position, config.domain_half_extent)
                trace.events.append(Event(t, "division", d.id, c.id))
                born.append(d)
                next_id += 1
        if len(cells) + len(born) > config.population_cap:
            raise PopulationCapError(f"population exceeds the cap of {config.population_cap} cells")
        cells = cells + born
        if p % per_snap == 0:
            snap(t)
    return trace
