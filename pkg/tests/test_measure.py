import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheroidsim.core import CellState
from spheroidsim.lifecycle import CellAgent, Snapshot
from spheroidsim.measure import (
    LINK_DISTANCE,
    detect_spheroids,
    disk_union_area,
    group_by_quantiles,
    hull_volume,
    measure,
    projected_area,
    union_find_clusters,
    volume_per_cell,
)

R = 6.0
DISK = np.pi * R**2
SPHERE = 4 / 3 * np.pi * R**3


def cells_at(points, state=CellState.QUIESCENT):
    return [CellAgent(i, np.asarray(p, float), R, state) for i, p in enumerate(points)]


def test_detect_examples():
    assert detect_spheroids([]) == []
    far = detect_spheroids(cells_at([[0, 0, 0], [100 * R, 0, 0]]))
    assert [c.n_cells for c in far] == [1, 1]
    chain = detect_spheroids(cells_at([[i * R, 0, 0] for i in range(5)]))
    assert len(chain) == 1 and chain[0].ids.tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        detect_spheroids(cells_at([[0, 0, 0]]), 0.0)


def test_apoptotic_cells_are_ignored():
    cells = cells_at([[0, 0, 0], [10, 0, 0], [20, 0, 0]])
    cells[1].state = CellState.APOPTOTIC
    assert [c.ids.tolist() for c in detect_spheroids(cells)] == [[0], [2]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 80), st.integers(0, 2**31))
def test_clusters_match_union_find(n, seed):
    pos = np.random.default_rng(seed).uniform(-40, 40, (n, 3))
    got = sorted(sorted(c.index.tolist()) for c in detect_spheroids(cells_at(pos)))
    want = sorted(sorted(g) for g in union_find_clusters(pos, LINK_DISTANCE))
    assert got == want
    assert sum(len(g) for g in got) == n


def test_area_examples():
    one = cells_at([[0, 0, 0]])
    assert projected_area(detect_spheroids(one)[0], one, pixel=0.25) == pytest.approx(DISK, rel=0.01)
    same_xy = cells_at([[0, 0, 0], [0, 0, 10]])
    assert projected_area(detect_spheroids(same_xy)[0], same_xy, 0.25) == pytest.approx(
        disk_union_area([[0, 0]], R, 0.25))
    apart = disk_union_area([[0, 0], [2 * R + 1, 0]], R, 0.25)
    assert apart == pytest.approx(2 * DISK, rel=0.01)
    assert disk_union_area(np.zeros((0, 2))) == 0.0
    with pytest.raises(ValueError):
        disk_union_area([[0, 0]], R, 2.0)


def test_two_disk_overlap_matches_lens_formula():
    d = 5.0
    lens = 2 * R**2 * np.arccos(d / (2 * R)) - d / 2 * np.sqrt(4 * R**2 - d**2)
    assert disk_union_area([[0, 0], [d, 0]], R, 0.1) == pytest.approx(2 * DISK - lens, rel=0.005)


def test_volume_examples():
    one = cells_at([[0, 0, 0]])
    assert volume_per_cell(detect_spheroids(one)[0], one) == pytest.approx(904.8, abs=0.05)
    two = cells_at([[1, 1, 1], [1, 1, 1]])
    assert volume_per_cell(detect_spheroids(two)[0], two) == pytest.approx(452.4, abs=0.05)
    v, fb = hull_volume([[0, 0, 0], [8, 0, 0]])
    assert v == pytest.approx(SPHERE + DISK * 8) and not fb


def test_cube_corner_volume_against_rejection_sampling():
    corners = np.array([[x, y, z] for x in (0, 2 * R) for y in (0, 2 * R) for z in (0, 2 * R)])
    cells = cells_at(corners)
    cl = detect_spheroids(cells, link_distance=2 * R + 0.1)
    assert len(cl) == 1
    got = volume_per_cell(cl[0], cells) * 8
    # the hull of spheres at the corners is the cube dilated by R
    rng = np.random.default_rng(0)
    pts = rng.uniform(-R, 3 * R, (400_000, 3))
    gap = np.maximum(np.maximum(-pts, pts - 2 * R), 0.0)
    inside = np.linalg.norm(gap, axis=1) <= R
    mc = inside.mean() * (4 * R) ** 3
    assert got == pytest.approx(mc, rel=0.05)
    exact = (2 * R) ** 3 + 6 * (2 * R) ** 2 * R + 3 * np.pi * R**2 * (2 * R) + SPHERE
    assert mc == pytest.approx(exact, rel=0.01)


def test_degenerate_hull_falls_back():
    # coplanar points with zero radius give a flat hull
    v, fb = hull_volume([[0, 0, 0], [1, 0, 0], [0, 1, 0]], radius=0.0)
    assert fb and v == 0.0


def test_quantile_groups():
    assert group_by_quantiles([2000, 5000, 9000]) == ["small", "medium", "large"]
    with pytest.raises(ValueError):
        group_by_quantiles([1.0], 10.0, 5.0)


def test_snapshot_and_agents_agree():
    pos = np.array([[0, 0, 0], [7, 0, 0], [50, 0, 0.0]])
    states = np.array([1, 0, 2], np.int8)
    snap = Snapshot(0.0, np.arange(3), pos, states, np.zeros(3))
    agents = [CellAgent(i, pos[i], R, CellState(int(states[i]))) for i in range(3)]
    assert measure(snap).summary() == measure(agents).summary()
    assert measure(snap).total_cells == 2


def test_summary_of_empty_population():
    s = measure([]).summary()
    assert s["n_spheroids"] == 0 and s["mean_area_um2"] == 0.0 and s["n_cells"] == 0


pts = st.lists(st.tuples(*[st.floats(-30, 30)] * 3), min_size=1, max_size=25)


@settings(max_examples=25, deadline=None)
@given(pts, st.tuples(*[st.floats(-500, 500)] * 3))
def test_translation_invariance(points, shift):
    a = measure(cells_at(points))
    b = measure(cells_at(np.asarray(points) + np.asarray(shift)))
    assert a.cells_per_spheroid == b.cells_per_spheroid
    np.testing.assert_allclose(b.areas, a.areas, rtol=0.03)
    np.testing.assert_allclose(b.volumes_per_cell, a.volumes_per_cell, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(pts)
def test_distant_cell_adds_one_spheroid(points):
    a = measure(cells_at(points))
    b = measure(cells_at(list(points) + [(1000.0, 1000.0, 0.0)]))
    assert b.n_spheroids == a.n_spheroids + 1
    assert sum(b.areas) - sum(a.areas) == pytest.approx(DISK, rel=0.02)
    assert sum(b.cells_per_spheroid) == b.total_cells


@settings(max_examples=25, deadline=None)
@given(pts)
def test_pixel_refinement_converges(points):
    xy = np.asarray(points)[:, :2]
    coarse, fine = disk_union_area(xy, R, 0.5), disk_union_area(xy, R, 0.25)
    assert abs(coarse - fine) / fine < 0.02
