import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheroidsim import rng
from spheroidsim.core import (
    CellState,
    PhenotypeParams,
    PopulationCapError,
    SimConfig,
    group_parameters,
)
from spheroidsim.lifecycle import (
    CellAgent,
    Event,
    _division_draws,
    apply_death,
    attempt_division,
    classify,
    classify_array,
    run_reference,
    run_simulation,
)
from spheroidsim.measure import measure

TH = PhenotypeParams(0.00061, 1040.0, 500.0)
FAST = SimConfig(mechanics_dt=6.0)


def test_classify_examples_and_ties():
    assert classify(499, TH) == CellState.APOPTOTIC
    assert classify(1050, TH) == CellState.PROLIFERATING
    assert classify(800, TH) == CellState.QUIESCENT
    assert classify(500, TH) == CellState.QUIESCENT  # ties go to survival
    assert classify(1040, TH) == CellState.PROLIFERATING
    atp = np.array([499, 500, 800, 1040, 1050])
    assert classify_array(atp, TH).tolist() == [int(classify(a, TH)) for a in atp]


def _prolif(i=0):
    return CellAgent(i, np.zeros(3), 6.0, CellState.PROLIFERATING)


def test_no_division_without_rate_or_proliferation():
    s = rng.RngStream(0)
    assert all(attempt_division(_prolif(), 0.0, 6.0, s, c, 1) is None for c in range(2000))
    q = CellAgent(0, np.zeros(3), 6.0, CellState.QUIESCENT)
    assert all(attempt_division(q, 0.009, 6.0, s, c, 1) is None for c in range(2000))
    with pytest.raises(ValueError):
        attempt_division(_prolif(), 0.02, 6.0, s, 0, 1)


def test_daughter_placement():
    s = rng.RngStream(5)
    for c in range(5000):
        d = attempt_division(_prolif(3), 0.009, 6.0, s, c, 99)
        if d is not None:
            break
    assert d.id == 99 and d.state == CellState.PROLIFERATING
    assert np.linalg.norm(d.position) == pytest.approx(6.0)


def test_compiled_draws_match_object_path():
    ids = np.arange(500, dtype=np.int64)
    states = np.zeros(500, np.int8)
    s = rng.RngStream(11)
    for counter in (1, 2, 3):
        par, offs = _division_draws(11, ids, states, counter, 0.05, 6.0)
        want = [i for i in range(500) if attempt_division(_prolif(i), 0.05 / 6, 6.0, s, counter, -1)]
        assert par.tolist() == want
        for m, i in enumerate(par):
            np.testing.assert_allclose(offs[m], 6.0 * s.direction(int(i), rng.DAUGHTER, counter))


def test_division_count_matches_bernoulli_chain():
    # one always-proliferating cell whose daughters are ignored
    k, dt, steps, trials = 0.00061, 6.0, 100, 10_000
    ids = np.arange(trials, dtype=np.int64)
    states = np.zeros(trials, np.int8)
    count = 0
    for c in range(1, steps + 1):
        par, _ = _division_draws(7, ids, states, c, k * dt, 6.0)
        count += len(par)
    p = k * dt
    mean, sd = steps * p, np.sqrt(steps * p * (1 - p) / trials)
    assert abs(count / trials - mean) < 3 * sd
    assert mean == pytest.approx(k * steps * dt)


def test_exponential_growth_rate():
    # every cell proliferates from the start; E[N] = (1 + k dt)^steps for the Yule chain
    params = group_parameters("large")
    cfg = FAST.replace(duration=2880.0, initial_atp=1200.0)
    n = np.array([run_simulation(cfg.replace(seed=s), params).final.living.sum()
                  for s in range(200)], dtype=float)
    p = params.phenotype.k_prolif * 6.0
    expected = (1 + p) ** 480
    assert abs(n.mean() - expected) < 3 * n.std(ddof=1) / np.sqrt(len(n))
    doubling = np.log(2) / (np.log(1 + p) / 6.0)
    assert doubling == pytest.approx(np.log(2) / params.phenotype.k_prolif, rel=0.01)
    assert np.log(2) / params.phenotype.k_prolif == pytest.approx(1136.3, abs=0.1)


def test_apply_death():
    cells = [CellAgent(i, np.zeros(3), 6.0, CellState.QUIESCENT) for i in range(3)]
    assert apply_death(cells) == cells
    cells[1].state = CellState.APOPTOTIC
    events = []
    left = apply_death(cells, 6.0, events)
    assert [c.id for c in left] == [0, 2]
    assert events == [Event(6.0, "death", 1)]
    for c in cells:
        c.state = CellState.APOPTOTIC
    assert apply_death(cells) == []


def test_zero_duration_has_only_initial_snapshot():
    tr = run_simulation(FAST.replace(duration=0.0), group_parameters("large"))
    assert len(tr.snapshots) == 1 and tr.snapshots[0].time == 0.0
    assert tr.daily_table()[0]["n_cells"] == 1


def test_high_energy_demand_dies_out():
    params = group_parameters("large").with_values(k_ene=0.1)
    tr = run_simulation(FAST.replace(duration=2880.0), params)
    assert tr.final.living.sum() == 0
    assert tr.n_deaths() == 1
    rep = measure(tr.final)
    assert rep.summary()["mean_area_um2"] == 0.0 and rep.n_spheroids == 0


def test_large_group_count_is_non_decreasing():
    tr = run_simulation(FAST.replace(seed=4), group_parameters("large"))
    counts = [r["n_cells"] for r in tr.daily_table()]
    assert len(counts) == 8
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] > counts[0] and tr.n_deaths() == 0


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(["large", "medium", "small"]), st.integers(0, 2**31),
       st.sampled_from([300.0, 770.0, 1100.0]))
def test_event_log_balances_population(group, seed, atp0):
    cfg = FAST.replace(duration=2880.0, seed=seed, initial_cells=3, initial_spread=10.0,
                       initial_atp=atp0)
    tr = run_simulation(cfg, group_parameters(group))
    for s in tr.snapshots:
        assert len(s.ids) == tr.initial_count + tr.n_divisions(s.time) - tr.n_deaths(s.time)
    assert len(set(tr.final.ids.tolist())) == len(tr.final.ids)


def test_population_cap():
    cfg = FAST.replace(duration=4 * 1440.0, population_cap=5, initial_atp=1200.0)
    with pytest.raises(PopulationCapError, match="cap of 5"):
        for s in range(20):
            run_simulation(cfg.replace(seed=s), group_parameters("large"))


def test_runs_are_deterministic():
    cfg = FAST.replace(seed=12, duration=3 * 1440.0)
    a = run_simulation(cfg, group_parameters("large"))
    b = run_simulation(cfg, group_parameters("large"))
    for sa, sb in zip(a.snapshots, b.snapshots):
        np.testing.assert_array_equal(sa.positions, sb.positions)
        np.testing.assert_array_equal(sa.ids, sb.ids)
        np.testing.assert_array_equal(sa.atp, sb.atp)
    assert a.events == b.events


def test_compiled_driver_matches_reference_driver():
    cfg = SimConfig(duration=1440.0, mechanics_dt=1.0, persistence_time=1.0, seed=3,
                    initial_cells=4, initial_spread=8.0, initial_atp=1100.0)
    params = group_parameters("large")
    fast, ref = run_simulation(cfg, params), run_reference(cfg, params)
    assert fast.events == ref.events
    for a, b in zip(fast.snapshots, ref.snapshots):
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_allclose(a.positions, b.positions, atol=1e-9)
        np.testing.assert_allclose(a.atp, b.atp, rtol=1e-12)


def test_mechanics_timestep_barely_changes_morphology():
    params = group_parameters("large")
    cfg = SimConfig(duration=4 * 1440.0, seed=1)
    fine = run_simulation(cfg.replace(mechanics_dt=1.0), params)
    coarse = run_simulation(cfg.replace(mechanics_dt=6.0), params)
    np.testing.assert_array_equal(fine.final.ids, coarse.final.ids)
    a, b = measure(fine.final).summary(), measure(coarse.final).summary()
    assert a["n_cells"] > 10
    assert b["mean_area_um2"] == pytest.approx(a["mean_area_um2"], rel=0.03)


def test_trace_csv_writers(tmp_path):
    tr = run_simulation(FAST.replace(duration=2880.0, seed=2), group_parameters("large"))
    tr.write_aggregates_csv(tmp_path / "a.csv")
    tr.write_cells_csv(tmp_path / "c.csv")
    tr.write_events_csv(tmp_path / "e.csv")
    head = (tmp_path / "a.csv").read_text().splitlines()
    assert head[0].startswith("day,time_min,n_cells") and len(head) == 4
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "day,id,x_um,y_um,z_um,state,atp"
    tr.write_cells_csv(tmp_path / "c2.csv")
    assert (tmp_path / "c.csv").read_bytes() == (tmp_path / "c2.csv").read_bytes()
