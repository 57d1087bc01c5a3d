"""Centre-based overdamped mechanics.

Each living cell moves with v = ΣF / (6πRη): pairwise adhesion and repulsion
from its neighbours plus, for proliferating cells, a random locomotive force.
Positions advance with forward Euler from a snapshot of the previous step
(Jacobi update), so the result does not depend on the order cells are visited.

Adhesion between two cells reaches out to the sum of their adhesion radii;
repulsion to the sum of their radii.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from . import rng as _rng
from .core import CellState, MechanicalParams
from .metabolism import rk4_rows

COINCIDENCE_TOL = 1e-9
LOC_COEFFS = (1.56, 3.27, 0.07, 0.06)

_PROLIF = int(CellState.PROLIFERATING)
_APOPTOTIC = int(CellState.APOPTOTIC)

# lanes of the LOCOMOTION substream
_LANE_P = 0
_LANE_DIR = 1      # uses 1 and 2
_LANE_SWITCH = 3


# ---------------------------------------------------------------- scalar API

def _separation(x_i, x_j):
    r = np.asarray(x_j, dtype=float) - np.asarray(x_i, dtype=float)
    return r, float(np.sqrt(r @ r))


def adhesion_force(x_i, x_j, params: MechanicalParams) -> np.ndarray:
    """Adhesive pull on cell i toward cell j: C_cca (1 - |r|/R_A)^2 r̂ inside range."""
    r, d = _separation(x_i, x_j)
    if d <= COINCIDENCE_TOL:
        raise ValueError("adhesion direction undefined for coincident cells")
    reach = params.adhesion_range
    if d >= reach:
        return np.zeros(3)
    return params.c_cca * (1.0 - d / reach) ** 2 * (r / d)


def coincident_direction(stream, key_i: int, key_j: int, counter: int) -> np.ndarray:
    """Unit push direction for cell i when i and j sit on top of each other.

    The pair shares one draw, so the two cells are pushed in exactly opposite
    directions.
    """
    lo, hi = min(key_i, key_j), max(key_i, key_j)
    u = _rng.unit_vector(stream.seed, lo, _rng.COINCIDENT, counter, 2 * hi)
    return -u if key_i == lo else u


def repulsion_force(x_i, x_j, r_i: float, r_j: float, params: MechanicalParams,
                    stream=None, key_i: int = 0, key_j: int = 1, counter: int = 0) -> np.ndarray:
    """Push on cell i away from cell j: C_ccr (1 - |r|/R_d)^2 with R_d = r_i + r_j."""
    r, d = _separation(x_i, x_j)
    reach = r_i + r_j
    if d >= reach:
        return np.zeros(3)
    if d <= COINCIDENCE_TOL:
        stream = stream if stream is not None else _rng.RngStream(0)
        return params.c_ccr * (1.0 - d / reach) ** 2 * coincident_direction(stream, key_i, key_j, counter)
    return -params.c_ccr * (1.0 - d / reach) ** 2 * (r / d)


def locomotive_magnitude(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"locomotion draw p={p} outside [0, 1]")
    a, b, c, e = LOC_COEFFS
    return ((a * p + b) * p + c) * p + e


def locomotive_force(cell, scale: float, stream, counter: int = 0) -> np.ndarray:
    """Fresh locomotive force for a proliferating cell at the given step counter."""
    if CellState(cell.state) != CellState.PROLIFERATING:
        raise ValueError("only proliferating cells generate a locomotive force")
    if scale == 0.0:
        return np.zeros(3)
    p = stream.uniform(cell.id, _rng.LOCOMOTION, counter, _LANE_P)
    u = stream.direction(cell.id, _rng.LOCOMOTION, counter, _LANE_DIR)
    return scale * locomotive_magnitude(p) * u


def velocity(cell, net_force, params: MechanicalParams) -> np.ndarray:
    """Stokes-drag velocity (µm/min) for the summed force on a cell."""
    radius = params.radius if cell is None else cell.radius
    return np.asarray(net_force, dtype=float) / (6.0 * np.pi * radius * params.eta)


def reflect(x, half: float):
    """Mirror coordinates back into [-half, half]."""
    x = np.where(x > half, 2.0 * half - x, x)
    x = np.where(x < -half, -2.0 * half - x, x)
    return np.clip(x, -half, half)


def step_positions(cells, params: MechanicalParams, dt: float, stream=None, step: int = 0,
                   scale: float = 1.0, half_extent: float = np.inf) -> np.ndarray:
    """Reference O(N^2) Euler step; returns the new (N, 3) positions.

    Locomotion is redrawn every call. Used as the oracle for the compiled kernel.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    stream = stream if stream is not None else _rng.RngStream(0)
    pos = np.array([c.position for c in cells], dtype=float).reshape(-1, 3)
    new = pos.copy()
    for i, ci in enumerate(cells):
        if ci.state == CellState.APOPTOTIC:
            continue
        f = np.zeros(3)
        for j, cj in enumerate(cells):
            if i == j or cj.state == CellState.APOPTOTIC:
                continue
            _, d = _separation(pos[i], pos[j])
            if d > COINCIDENCE_TOL:
                f += adhesion_force(pos[i], pos[j], params)
            f += repulsion_force(pos[i], pos[j], ci.radius, cj.radius, params,
                                 stream, ci.id, cj.id, step)
        if ci.state == CellState.PROLIFERATING:
            f += locomotive_force(ci, scale, stream, step)
        new[i] = pos[i] + velocity(ci, f, params) * dt
    if np.isfinite(half_extent):
        new = reflect(new, half_extent)
    return new


# ------------------------------------------------------------- spatial grid

@nb.njit(cache=True, inline="always")
def _hash(bx, by, bz, mask):
    return ((bx * 73856093) ^ (by * 19349663) ^ (bz * 83492791)) & mask


@nb.njit(cache=True)
def build_grid(pos, active, h):
    """Counting-sort active cells into a hashed uniform grid of bin size ``h``."""
    n = pos.shape[0]
    size = 1
    while size < 2 * max(n, 1):
        size *= 2
    mask = size - 1
    bins = np.empty((n, 3), dtype=np.int64)
    keys = np.full(n, -1, dtype=np.int64)
    start = np.zeros(size + 1, dtype=np.int64)
    for i in range(n):
        for a in range(3):
            bins[i, a] = np.int64(np.floor(pos[i, a] / h))
        if active[i]:
            k = _hash(bins[i, 0], bins[i, 1], bins[i, 2], mask)
            keys[i] = k
            start[k + 1] += 1
    for k in range(size):
        start[k + 1] += start[k]
    fill = start[:-1].copy()
    order = np.empty(start[size], dtype=np.int64)
    for i in range(n):
        k = keys[i]
        if k >= 0:
            order[fill[k]] = i
            fill[k] += 1
    return start, order, bins, mask


@nb.njit(cache=True)
def grid_pairs(pos, active, h, radius):
    """All active pairs (i < j) with |x_i - x_j| <= radius; requires radius <= h."""
    start, order, bins, mask = build_grid(pos, active, h)
    out_i = []
    out_j = []
    for i in range(pos.shape[0]):
        if not active[i]:
            continue
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    bx = bins[i, 0] + dx
                    by = bins[i, 1] + dy
                    bz = bins[i, 2] + dz
                    k = _hash(bx, by, bz, mask)
                    for idx in range(start[k], start[k + 1]):
                        j = order[idx]
                        if j <= i or bins[j, 0] != bx or bins[j, 1] != by or bins[j, 2] != bz:
                            continue
                        d2 = 0.0
                        for a in range(3):
                            t = pos[j, a] - pos[i, a]
                            d2 += t * t
                        if d2 <= radius * radius:
                            out_i.append(i)
                            out_j.append(j)
    res = np.empty((len(out_i), 2), dtype=np.int64)
    for m in range(len(out_i)):
        res[m, 0] = out_i[m]
        res[m, 1] = out_j[m]
    return res


class NeighborIndex:
    """Uniform hashed grid over cell centres; bin size bounds the query radius."""

    def __init__(self, positions, bin_size: float, active=None):
        if bin_size <= 0:
            raise ValueError("bin_size must be positive")
        self.positions = np.ascontiguousarray(positions, dtype=float).reshape(-1, 3)
        self.bin_size = float(bin_size)
        n = len(self.positions)
        self.active = np.ones(n, dtype=np.bool_) if active is None else np.asarray(active, dtype=np.bool_)

    def pairs(self, radius: float) -> np.ndarray:
        """Sorted (i, j) index pairs, i < j, within ``radius``."""
        if radius > self.bin_size:
            raise ValueError("query radius exceeds the grid bin size")
        res = grid_pairs(self.positions, self.active, self.bin_size, float(radius))
        if len(res) == 0:
            return res
        return res[np.lexsort((res[:, 1], res[:, 0]))]


def brute_force_pairs(positions, radius: float) -> np.ndarray:
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    i, j = np.nonzero(np.triu(d2 <= radius * radius, k=1))
    return np.stack([i, j], axis=1).astype(np.int64)


# ------------------------------------------------------------ chunk kernel

@nb.njit(cache=True, inline="always")
def _loc_mag(p):
    return ((1.56 * p + 3.27) * p + 0.07) * p + 0.06


@nb.njit(cache=True)
def advance(pos, state, ids, loc, loc_live, pool, n_steps, step0, dt,
            c_cca, c_ccr, adh_range, rep_range, drag, half, scale, switch_prob,
            seed, kvec, nsub, glu, o2):
    """Run ``n_steps`` coupled metabolism + mechanics steps in place.

    ``pool`` holds the distinct metabolic states referenced by the cells;
    every row is integrated once per step. Locomotive forces persist between
    steps and are redrawn with probability ``switch_prob`` (always when >= 1).
    Returns (pool row, species) of a non-finite metabolite, else (-1, -1).
    """
    n = pos.shape[0]
    active = np.empty(n, dtype=np.bool_)
    for i in range(n):
        active[i] = state[i] != _APOPTOTIC
    h = max(adh_range, rep_range)
    vel = np.zeros((n, 3))
    for s in range(n_steps):
        step = step0 + s
        bad_row, bad_sp = rk4_rows(pool, kvec, dt, nsub, glu, o2)
        if bad_row >= 0:
            return bad_row, bad_sp
        start, order, bins, mask = build_grid(pos, active, h)
        for i in range(n):
            vel[i, 0] = 0.0
            vel[i, 1] = 0.0
            vel[i, 2] = 0.0
            if not active[i]:
                continue
            fx = 0.0
            fy = 0.0
            fz = 0.0
            for dx in range(-1, 2):
                for dy in range(-1, 2):
                    for dz in range(-1, 2):
                        bx = bins[i, 0] + dx
                        by = bins[i, 1] + dy
                        bz = bins[i, 2] + dz
                        k = _hash(bx, by, bz, mask)
                        for idx in range(start[k], start[k + 1]):
                            j = order[idx]
                            if j == i or bins[j, 0] != bx or bins[j, 1] != by or bins[j, 2] != bz:
                                continue
                            rx = pos[j, 0] - pos[i, 0]
                            ry = pos[j, 1] - pos[i, 1]
                            rz = pos[j, 2] - pos[i, 2]
                            d = np.sqrt(rx * rx + ry * ry + rz * rz)
                            if d >= h:
                                continue
                            if d <= COINCIDENCE_TOL:
                                lo = min(ids[i], ids[j])
                                hi = max(ids[i], ids[j])
                                u = _rng.unit_vector(seed, lo, _rng.COINCIDENT, step, 2 * hi)
                                sgn = -1.0 if ids[i] == lo else 1.0
                                mag = c_ccr * (1.0 - d / rep_range) ** 2 * sgn
                                fx += mag * u[0]
                                fy += mag * u[1]
                                fz += mag * u[2]
                                continue
                            # positive pulls i toward j
                            mag = 0.0
                            if d < adh_range:
                                mag += c_cca * (1.0 - d / adh_range) ** 2
                            if d < rep_range:
                                mag -= c_ccr * (1.0 - d / rep_range) ** 2
                            fx += mag * rx / d
                            fy += mag * ry / d
                            fz += mag * rz / d
            if state[i] == _PROLIF and scale > 0.0:
                redraw = (not loc_live[i]) or switch_prob >= 1.0
                if not redraw:
                    redraw = _rng.uniform01(seed, ids[i], _rng.LOCOMOTION, step, _LANE_SWITCH) < switch_prob
                if redraw:
                    p = _rng.uniform01(seed, ids[i], _rng.LOCOMOTION, step, _LANE_P)
                    u = _rng.unit_vector(seed, ids[i], _rng.LOCOMOTION, step, _LANE_DIR)
                    m = scale * _loc_mag(p)
                    loc[i, 0] = m * u[0]
                    loc[i, 1] = m * u[1]
                    loc[i, 2] = m * u[2]
                    loc_live[i] = True
                fx += loc[i, 0]
                fy += loc[i, 1]
                fz += loc[i, 2]
            vel[i, 0] = fx / drag
            vel[i, 1] = fy / drag
            vel[i, 2] = fz / drag
        for i in range(n):
            if not active[i]:
                continue
            for a in range(3):
                x = pos[i, a] + vel[i, a] * dt
                if x > half:
                    x = 2.0 * half - x
                if x < -half:
                    x = -2.0 * half - x
                pos[i, a] = min(max(x, -half), half)
    return -1, -1
