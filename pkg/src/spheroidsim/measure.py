"""Morphology of simulated spheroids: clustering, projected area, compactness.

A spheroid is a single-linkage cluster of living cells. Its projected area is
the rasterised union of the member disks in the x-y plane; its volume is the
convex hull of the member spheres.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

from .core import CellState

RADIUS = 6.0
LINK_DISTANCE = 2 * RADIUS * 1.125
DEFAULT_PIXEL = 0.5
Q1_AREA = 2500.0
Q3_AREA = 7500.0
SPHERE_DIRECTIONS = 128


@dataclass(frozen=True)
class SpheroidCluster:
    ids: np.ndarray
    centroid: np.ndarray
    index: np.ndarray  # rows into the position array the cluster was built from

    @property
    def n_cells(self) -> int:
        return len(self.ids)


def living_cells(cells):
    """(ids, positions) of the non-apoptotic cells in a snapshot or list of agents."""
    if hasattr(cells, "positions"):
        keep = cells.states != int(CellState.APOPTOTIC)
        return cells.ids[keep], cells.positions[keep]
    alive = [c for c in cells if CellState(c.state) != CellState.APOPTOTIC]
    ids = np.array([c.id for c in alive], dtype=np.int64)
    pos = np.array([c.position for c in alive], dtype=float).reshape(-1, 3)
    return ids, pos


def detect_spheroids(cells, link_distance: float = LINK_DISTANCE) -> list[SpheroidCluster]:
    """Connected components of the graph linking cells closer than ``link_distance``.

    Clusters are ordered by their smallest member id.
    """
    if not link_distance > 0:
        raise ValueError("link_distance must be positive")
    ids, pos = living_cells(cells)
    n = len(ids)
    if n == 0:
        return []
    pairs = cKDTree(pos).query_pairs(link_distance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    out = []
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        idx = idx[np.argsort(ids[idx], kind="stable")]
        out.append(SpheroidCluster(ids[idx], pos[idx].mean(axis=0), idx))
    out.sort(key=lambda c: int(c.ids[0]))
    return out


def union_find_clusters(positions, link_distance: float) -> list[set]:
    """Brute-force single linkage; used to cross-check :func:`detect_spheroids`."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    parent = list(range(len(pos)))

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(pos)):
        for j in range(i + 1, len(pos)):
            if np.linalg.norm(pos[i] - pos[j]) <= link_distance:
                parent[root(i)] = root(j)
    groups: dict[int, set] = {}
    for i in range(len(pos)):
        groups.setdefault(root(i), set()).add(i)
    return list(groups.values())


@nb.njit(cache=True)
def _raster_count(xy, radius, pixel):
    x0 = xy[:, 0].min() - radius
    y0 = xy[:, 1].min() - radius
    nx = int(np.ceil((xy[:, 0].max() + radius - x0) / pixel)) + 1
    ny = int(np.ceil((xy[:, 1].max() + radius - y0) / pixel)) + 1
    mask = np.zeros((nx, ny), dtype=np.bool_)
    r2 = radius * radius
    for k in range(xy.shape[0]):
        cx = xy[k, 0]
        cy = xy[k, 1]
        i0 = max(0, int(np.floor((cx - radius - x0) / pixel)))
        i1 = min(nx - 1, int(np.ceil((cx + radius - x0) / pixel)))
        j0 = max(0, int(np.floor((cy - radius - y0) / pixel)))
        j1 = min(ny - 1, int(np.ceil((cy + radius - y0) / pixel)))
        for i in range(i0, i1 + 1):
            px = x0 + (i + 0.5) * pixel - cx
            for j in range(j0, j1 + 1):
                py = y0 + (j + 0.5) * pixel - cy
                if px * px + py * py <= r2:
                    mask[i, j] = True
    return mask.sum()


def disk_union_area(xy, radius: float = RADIUS, pixel: float = DEFAULT_PIXEL) -> float:
    """Area of a union of equal disks by pixel-centre sampling."""
    if pixel > radius / 4:
        raise ValueError("pixel must not exceed a quarter of the cell radius")
    xy = np.ascontiguousarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        return 0.0
    return float(_raster_count(xy, float(radius), float(pixel))) * pixel * pixel


def projected_area(cluster: SpheroidCluster, cells, pixel: float = DEFAULT_PIXEL,
                   radius: float = RADIUS) -> float:
    _, pos = living_cells(cells)
    return disk_union_area(pos[cluster.index, :2], radius, pixel)


def sphere_directions(n: int = SPHERE_DIRECTIONS) -> np.ndarray:
    """Quasi-uniform unit vectors (Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5.0 ** 0.5) * i
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


_DIRS = sphere_directions()


def hull_volume(centers, radius: float = RADIUS) -> tuple[float, bool]:
    """Volume of the convex hull of equal spheres and whether a fallback was used.

    One or two spheres are handled in closed form (sphere, capsule); larger
    sets use the hull of points sampled on every sphere. If the hull cannot be
    built the result falls back to the summed sphere volumes.
    """
    c = np.asarray(centers, dtype=float).reshape(-1, 3)
    sphere = 4.0 / 3.0 * np.pi * radius**3
    if len(c) == 0:
        return 0.0, False
    if len(c) == 1:
        return sphere, False
    if len(c) == 2:
        return sphere + np.pi * radius**2 * float(np.linalg.norm(c[1] - c[0])), False
    pts = (c[:, None, :] + radius * _DIRS[None]).reshape(-1, 3)
    try:
        return float(ConvexHull(pts).volume), False
    except QhullError:
        return len(c) * sphere, True


def volume_per_cell(cluster: SpheroidCluster, cells, radius: float = RADIUS) -> float:
    _, pos = living_cells(cells)
    v, _ = hull_volume(pos[cluster.index], radius)
    return v / cluster.n_cells


def group_by_quantiles(areas, q1: float = Q1_AREA, q3: float = Q3_AREA) -> list[str]:
    if not q1 < q3:
        raise ValueError("q1 must be below q3")
    out = []
    for a in areas:
        out.append("small" if a < q1 else "large" if a > q3 else "medium")
    return out


@dataclass
class MorphologyReport:
    areas: list = field(default_factory=list)
    cells_per_spheroid: list = field(default_factory=list)
    volumes_per_cell: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    total_cells: int = 0

    @property
    def n_spheroids(self) -> int:
        return len(self.areas)

    def summary(self) -> dict:
        """Replicate-level aggregates; empty populations report zeros."""
        a = np.asarray(self.areas, dtype=float)
        v = np.asarray(self.volumes_per_cell, dtype=float)
        n = np.asarray(self.cells_per_spheroid, dtype=float)
        return {
            "n_cells": self.total_cells,
            "n_spheroids": self.n_spheroids,
            "mean_area_um2": float(a.mean()) if a.size else 0.0,
            "max_area_um2": float(a.max()) if a.size else 0.0,
            "total_area_um2": float(a.sum()),
            "mean_cells_per_spheroid": float(n.mean()) if n.size else 0.0,
            # cell-weighted, so large spheroids dominate as in a pooled measurement
            "volume_per_cell_um3": float((v * n).sum() / n.sum()) if n.size else 0.0,
        }


def measure(cells, link_distance: float = LINK_DISTANCE, pixel: float = DEFAULT_PIXEL,
            radius: float = RADIUS, volume: bool = True) -> MorphologyReport:
    """Per-spheroid metrics; ``volume=False`` skips the hull (reported as NaN)."""
    ids, pos = living_cells(cells)
    rep = MorphologyReport(total_cells=len(ids))
    for cl in detect_spheroids(cells, link_distance):
        rep.areas.append(disk_union_area(pos[cl.index, :2], radius, pixel))
        rep.cells_per_spheroid.append(cl.n_cells)
        vol, fb = hull_volume(pos[cl.index], radius) if volume else (np.nan, False)
        rep.volumes_per_cell.append(vol / cl.n_cells)
        rep.fallback.append(fb)
    return rep


def measure_trace(trace, **kw) -> dict[int, MorphologyReport]:
    """Morphology of every snapshot keyed by day."""
    return {s.day: measure(s, **kw) for s in trace.snapshots}


def spheroid_rows(reports: dict, replicate=0) -> list[dict]:
    rows = []
    for day, rep in sorted(reports.items()):
        for k in range(rep.n_spheroids):
            rows.append({
                "replicate": replicate, "day": day, "spheroid": k,
                "n_cells": rep.cells_per_spheroid[k], "area_um2": rep.areas[k],
                "volume_per_cell_um3": rep.volumes_per_cell[k],
                "volume_fallback": int(rep.fallback[k]),
            })
    return rows


def aggregate_rows(reports: dict, replicate=0) -> list[dict]:
    return [{"replicate": replicate, "day": day, **rep.summary()}
            for day, rep in sorted(reports.items())]
