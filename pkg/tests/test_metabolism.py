import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from spheroidsim.core import IntegrationError, MetabolicParams
from spheroidsim.metabolism import (
    STOICHIOMETRY,
    MetabolicState,
    ReactionRates,
    apply_stoichiometry,
    initial_state,
    integrate,
    integrate_array,
    network_table,
    reaction_rates,
)

ONES = MetabolicState(glu=1, nad_plus=1, nadh=1, pyr=1, lac=0, o2=1, atp=1)
UNIT_K = MetabolicParams(1.0, 1.0, 1.0, 1.0)


def test_rates_examples():
    zero = reaction_rates(MetabolicState(), UNIT_K)
    assert zero.as_array().tolist() == [0, 0, 0, 0]
    np.testing.assert_array_equal(reaction_rates(ONES, UNIT_K).as_array(), [1, 1, 1, 1])
    doubled = reaction_rates(ONES.replace(nad_plus=2.0), UNIT_K)
    assert doubled.r_glyc == 4.0 and doubled.r_ferm == 1.0


def test_stoichiometry_rows():
    glyc = apply_stoichiometry(ONES, ReactionRates(1, 0, 0, 0))
    d = dict(zip(["glu", "nad", "nadh", "pyr", "lac", "o2", "atp"], glyc))
    assert (d["atp"], d["nad"], d["nadh"], d["glu"], d["pyr"]) == (2, -2, 2, -1, 2)
    aer = apply_stoichiometry(ONES, ReactionRates(0, 1, 0, 0))
    assert aer[6] == 17 and aer[5] == -3 and aer[1] == 1 and aer[2] == -1
    ferm = apply_stoichiometry(ONES, ReactionRates(0, 0, 1, 0))
    assert ferm.tolist() == [0, 1, -1, -1, 1, 0, 0]
    cons = apply_stoichiometry(ONES, ReactionRates(0, 0, 0, 1))
    assert cons.tolist() == [0, 0, 0, 0, 0, 0, -1]
    assert not np.any(apply_stoichiometry(ONES, ReactionRates(0, 0, 0, 0)))
    # NAD+ + NADH is untouched by every reaction
    np.testing.assert_array_equal(STOICHIOMETRY[1] + STOICHIOMETRY[2], 0)


def test_zero_rates_leave_state_unchanged():
    s = initial_state(5.0, 3.0, 10.0, 700.0)
    assert integrate(s, MetabolicParams(0, 0, 0, 0), 1.0, 0.01) == s


def test_pure_decay_matches_exponential():
    k = MetabolicParams(0, 0, 0, 0.5)
    s = MetabolicState(atp=800.0)
    t = 0.0
    for _ in range(50):
        s = integrate(s, k, 0.2, 0.02)  # k_ene*substep = 0.01
        t += 0.2
        assert s.atp == pytest.approx(800.0 * np.exp(-0.5 * t), rel=1e-8)


def test_rk4_is_fourth_order():
    k = MetabolicParams(0, 0, 0, 1.0)
    s = MetabolicState(atp=1.0)
    exact = np.exp(-2.0)
    e1 = abs(integrate(s, k, 2.0, 0.2).atp - exact)
    e2 = abs(integrate(s, k, 2.0, 0.1).atp - exact)
    assert 14.0 < e1 / e2 < 18.0


def test_nad_conservation_over_many_steps():
    k = MetabolicParams(0.66e-11, 5e-12, 5e-12, 0.033)
    y = initial_state(1.6e5, 1e10, 1000.0, 770.0).as_array()[None].copy()
    total0 = y[0, 1] + y[0, 2]
    integrate_array(y, k, 100.0, 0.01, 1.6e5, 1e10)  # 10^4 substeps
    assert abs(y[0, 1] + y[0, 2] - total0) / total0 < 1e-9


def _rhs(_, y, k):
    s = MetabolicState.from_array(np.maximum(y, 0))
    return apply_stoichiometry(s, reaction_rates(s, k))


def test_matches_reference_ode_solver():
    k = MetabolicParams(2e-3, 1e-3, 5e-3, 0.05)
    s = MetabolicState(glu=2.0, nad_plus=1.0, nadh=0.5, pyr=0.3, lac=0.0, o2=3.0, atp=10.0)
    got = integrate(s, k, 5.0, 0.01, glu_supply=-1.0, o2_supply=-1.0)
    ref = solve_ivp(_rhs, (0, 5.0), s.as_array(), args=(k,), rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(got.as_array(), ref.y[:, -1], rtol=1e-7, atol=1e-10)


def test_clamped_supplies_hold():
    k = MetabolicParams(0.66e-11, 5e-12, 5e-12, 0.033)
    s = initial_state(1.6e5, 1e10, 1000.0, 770.0)
    out = integrate(s, k, 30.0, 0.01)
    assert out.glu == 1.6e5 and out.o2 == 1e10


def test_anaerobic_knob_orders_steady_states():
    base = initial_state(1.6e5, 1e10, 1000.0, 700.0)
    aer = integrate(base, MetabolicParams(0.66e-11, 5e-12, 0.0, 0.033), 600.0, 0.01)
    anaerobic = integrate(base.replace(o2=0.0), MetabolicParams(0.66e-11, 5e-12, 5e-12, 0.033),
                          600.0, 0.01)
    assert anaerobic.o2 == 0.0
    assert aer.atp > anaerobic.atp


def test_non_finite_state_names_species():
    s = MetabolicState(glu=1e200, nad_plus=1e200, atp=1.0)
    with pytest.raises(IntegrationError, match="glu|nad|pyr|atp"):
        integrate(s, MetabolicParams(1.0, 0, 0, 0), 1.0, 0.5, glu_supply=-1.0, o2_supply=-1.0)


def test_network_table_lists_every_reaction():
    text = network_table()
    for word in ("glycolysis", "aerobic", "fermentation", "consumption", "+17"):
        assert word in text


# amounts and rate constants kept inside the explicit integrator's stability region
positive = st.floats(0, 10, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[positive] * 7), st.tuples(*[st.floats(0, 1e-2)] * 4))
def test_species_stay_non_negative(y, k):
    s = MetabolicState(*y)
    out = integrate(s, MetabolicParams(*k), 1.0, 0.01)
    assert np.all(out.as_array() >= 0)
    assert out.nad_plus + out.nadh == pytest.approx(s.nad_plus + s.nadh, rel=1e-9, abs=1e-9)


def test_calibrated_groups_steady_state_atp():
    # settled ATP of the three calibrated groups against their thresholds
    s = initial_state(1.6e5, 1e10, 1000.0, 770.0)
    large = integrate(s, MetabolicParams(0.66e-11, 5e-12, 5e-12, 0.033), 1440.0, 0.01).atp
    medium = integrate(s, MetabolicParams(0.66e-11, 5e-12, 5e-12, 0.065), 1440.0, 0.01).atp
    small = integrate(s, MetabolicParams(0.54e-11, 5e-12, 5e-12, 0.084), 1440.0, 0.01).atp
    assert large >= 1040 and 500 <= medium < 1025 and small < 500
