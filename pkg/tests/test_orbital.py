import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tspc.orbital import (
    EARTH,
    SECONDS_PER_DAY,
    CartesianState,
    Constants,
    EphemerisError,
    OrbitalElements,
    SingularityError,
    advance_elements,
    compare_secular_rk4,
    convert_gtoc9_table,
    elements_from_record,
    elements_to_cartesian,
    j2_ode,
    read_ephemeris,
    rk4_propagate,
    secular_rates,
    specific_energy,
    transfer_cost,
    wrap_pi,
    write_ephemeris,
)

# independent hand evaluations (plain math, frozen)
RAAN_RATE_DEG_DAY = 0.9864556081819323  # a=7131.6 km, e=0, i=98.415 deg
DV_A_100KM = 52.4153424720592  # m/s, da = 100 km at a0 = 7131.6 km
DV_RAAN_1DEG_I98 = 129.21280152236986  # m/s
DV_I_1DEG = 130.48099356896756  # m/s
DV_E_1E3 = 3.7380525637373743  # m/s

A0 = 7131.6
I0 = math.radians(98.415)


def sso(**kw):
    base = dict(a=A0, e=0.0, i=I0, raan=1.0, argp=0.5, mean_anom=0.2, epoch=23557.0)
    base.update(kw)
    return OrbitalElements(**base)


# --- element validation ----------------------------------------------------


@pytest.mark.parametrize("kw", [dict(e=1.5), dict(e=-0.1), dict(a=6000.0), dict(i=4.0), dict(raan=math.nan)])
def test_elements_validation(kw):
    with pytest.raises(ValueError):
        sso(**kw)


def test_angles_are_wrapped():
    el = sso(raan=-0.5, argp=7.0)
    assert 0.0 <= el.raan < 2 * math.pi and el.raan == pytest.approx(2 * math.pi - 0.5)
    assert el.argp == pytest.approx(7.0 - 2 * math.pi)


# --- secular rates -----------------------------------------------------------


def test_raan_rate_near_sun_synchronous():
    rate = math.degrees(secular_rates(sso()).raan_dot) * SECONDS_PER_DAY
    assert rate == pytest.approx(RAAN_RATE_DEG_DAY, abs=1e-9)
    assert abs(rate - 0.986) < 1e-3


def test_polar_orbit_has_no_nodal_drift():
    # cos(pi/2) is 6e-17 in floating point; compare against the rate scale
    scale = abs(secular_rates(sso()).raan_dot)
    assert abs(secular_rates(sso(i=math.pi / 2)).raan_dot) < 1e-13 * scale


def test_critical_inclination_freezes_perigee():
    scale = abs(secular_rates(sso()).argp_dot)
    assert abs(secular_rates(sso(i=math.acos(1 / math.sqrt(5)))).argp_dot) < 1e-13 * scale


def test_advance_to_own_epoch_is_identity():
    el = sso()
    assert advance_elements(el, el.epoch) == el


def test_advance_ten_days():
    el = sso()
    moved = advance_elements(el, el.epoch + 10.0)
    delta = math.degrees(wrap_pi(moved.raan - el.raan))
    assert delta == pytest.approx(10 * RAAN_RATE_DEG_DAY, abs=1e-8)
    assert (moved.a, moved.e, moved.i) == (el.a, el.e, el.i)


def test_advance_one_nodal_period_returns_node():
    el = sso()
    period_days = 2 * math.pi / abs(secular_rates(el).raan_dot) / SECONDS_PER_DAY
    moved = advance_elements(el, el.epoch + period_days)
    assert abs(wrap_pi(moved.raan - el.raan)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 500), st.floats(0, 500))
def test_advance_composes_linearly(t1, t2):
    el = sso()
    chained = advance_elements(advance_elements(el, el.epoch + t1), el.epoch + t1 + t2)
    direct = advance_elements(el, el.epoch + t1 + t2)
    assert abs(wrap_pi(chained.raan - direct.raan)) < 1e-9
    assert abs(wrap_pi(chained.mean_anom - direct.mean_anom)) < 1e-6


# --- dynamics ------------------------------------------------------------------


def test_two_body_limit_acceleration():
    state = elements_to_cartesian(sso())
    deriv = j2_ode(state, Constants(j2=0.0))
    r = np.linalg.norm(state.position)
    assert np.linalg.norm(deriv[3:]) == pytest.approx(EARTH.mu / r**2, rel=1e-12)
    np.testing.assert_array_equal(deriv[:3], state.velocity)


def test_j2_ode_singular_at_origin():
    with pytest.raises(SingularityError):
        j2_ode(CartesianState(np.zeros(3), np.ones(3)))


def test_rk4_zero_duration_is_identity():
    state = elements_to_cartesian(sso())
    assert rk4_propagate(state, 0.0) is state


def test_rk4_two_body_period_return():
    consts = Constants(j2=0.0)
    el = sso()
    state = elements_to_cartesian(el, consts)
    period = 2 * math.pi * math.sqrt(el.a**3 / consts.mu)
    end = rk4_propagate(state, period, 1.0, consts)
    assert np.linalg.norm(end.position - state.position) < 1e-6


def test_rk4_fourth_order_convergence():
    consts = Constants(j2=0.0)
    state = elements_to_cartesian(sso(e=0.05), consts)
    exact = rk4_propagate(state, 3000.0, 2.5, consts)
    err = [np.linalg.norm(rk4_propagate(state, 3000.0, h, consts).position - exact.position) for h in (60.0, 30.0)]
    assert 12.0 < err[0] / err[1] < 20.0


def test_rk4_conserves_energy_with_j2():
    state = elements_to_cartesian(sso(e=0.01))
    end = rk4_propagate(state, 6 * 3600.0, 10.0)
    assert abs(specific_energy(end) - specific_energy(state)) < 1e-9 * abs(specific_energy(state))


def test_rk4_rejects_bad_step():
    with pytest.raises(ValueError):
        rk4_propagate(elements_to_cartesian(sso()), 10.0, 0.0)


def test_secular_and_integrated_node_drift_agree():
    secular, integrated = compare_secular_rk4(sso(), 10.0)
    assert math.degrees(abs(secular - integrated)) < 0.05
    assert compare_secular_rk4(sso(), 0.0) == (0.0, 0.0)


# --- transfer cost --------------------------------------------------------------


def test_identical_elements_cost_nothing():
    cost = transfer_cost(sso(), sso(), 17.0)
    assert (cost.dv_a, cost.dv_e, cost.dv_i, cost.dv_raan, cost.dv_total) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_semi_major_axis_component():
    cost = transfer_cost(sso(), sso(a=A0 + 100.0), 0.0)
    assert 1000 * cost.dv_a == pytest.approx(DV_A_100KM, abs=0.1)


def test_node_component():
    i98 = math.radians(98.0)
    cost = transfer_cost(sso(i=i98), sso(i=i98, raan=1.0 + math.radians(1.0)), 0.0)
    assert 1000 * cost.dv_raan == pytest.approx(DV_RAAN_1DEG_I98, abs=0.1)


def test_inclination_and_eccentricity_components():
    cost = transfer_cost(sso(), sso(i=I0 + math.radians(1.0)), 0.0)
    assert 1000 * cost.dv_i == pytest.approx(DV_I_1DEG, abs=0.1)
    cost = transfer_cost(sso(e=0.0), sso(e=1e-3), 0.0)
    assert 1000 * cost.dv_e == pytest.approx(DV_E_1E3, abs=0.1)


def test_total_is_root_sum_square_plus_node_term():
    cost = transfer_cost(sso(), sso(a=A0 + 50.0, e=2e-3, i=I0 + 0.01, raan=1.02), 3.0)
    rss = math.sqrt(cost.dv_a**2 + cost.dv_e**2 + cost.dv_i**2)
    assert cost.dv_total == pytest.approx(rss + cost.dv_raan, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(0, 25))
def test_node_mismatch_is_two_pi_invariant(d_raan, tof):
    one = transfer_cost(sso(), sso(raan=1.0 + d_raan), tof)
    two = transfer_cost(sso(), sso(raan=1.0 + d_raan + 2 * math.pi), tof)
    assert one.dv_total == pytest.approx(two.dv_total, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, math.pi), st.floats(0, math.pi - 0.01))
def test_node_term_monotone_in_mismatch(d1, extra):
    d2 = min(d1 + extra, math.pi)
    a = transfer_cost(sso(), sso(raan=1.0 + d1), 0.0).dv_raan
    b = transfer_cost(sso(), sso(raan=1.0 + d2), 0.0).dv_raan
    assert a <= b + 1e-15


def test_node_mismatch_is_symmetric_in_direction():
    plus = transfer_cost(sso(), sso(raan=1.3), 0.0).dv_raan
    minus = transfer_cost(sso(), sso(raan=0.7), 0.0).dv_raan
    assert plus == pytest.approx(minus, rel=1e-12)


def test_target_is_advanced_to_origin_epoch():
    origin = sso()
    target = advance_elements(sso(a=A0 + 20.0), origin.epoch - 30.0)
    direct = transfer_cost(origin, sso(a=A0 + 20.0), 5.0)
    via_epoch = transfer_cost(origin, target, 5.0)
    assert via_epoch.dv_total == pytest.approx(direct.dv_total, abs=1e-12)


# --- ephemeris ingestion ------------------------------------------------------------


SAMPLE = {"id": "23", "epoch_mjd2000": "23557", "a_m": "7131600.0", "e": "0.001", "i_rad": "1.7",
          "raan_rad": "0.3", "argp_rad": "0.2", "m_rad": "0.1"}


def test_record_converts_metres_to_km():
    debris_id, el = elements_from_record(SAMPLE)
    assert debris_id == 23 and el.a == pytest.approx(7131.6)


def test_record_with_hyperbolic_eccentricity_names_row():
    with pytest.raises(EphemerisError, match="row 23"):
        elements_from_record({**SAMPLE, "e": "1.5"})


@pytest.mark.parametrize("field,value", [("a_m", "1000"), ("i_rad", "4"), ("raan_rad", "nan"), ("a_m", "x")])
def test_record_rejects_bad_values(field, value):
    with pytest.raises(EphemerisError):
        elements_from_record({**SAMPLE, field: value})


def test_ephemeris_round_trip(tmp_path):
    catalog = {7: sso(), 3: sso(a=7200.0, e=0.002, raan=4.0)}
    path = tmp_path / "eph.csv"
    write_ephemeris(catalog, path)
    assert read_ephemeris(path) == catalog


def test_ephemeris_rejects_missing_columns_and_duplicates(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,a_m\n1,7000000\n")
    with pytest.raises(EphemerisError, match="missing columns"):
        read_ephemeris(path)
    write_ephemeris({1: sso()}, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + lines[1:]) + "\n")
    with pytest.raises(EphemerisError, match="duplicate"):
        read_ephemeris(path)


def test_convert_whitespace_table(tmp_path):
    src = tmp_path / "raw.txt"
    src.write_text("# id epoch a e i raan argp M\n"
                   "23 23557 7131600.0 0.001 1.7 0.3 0.2 0.1\n"
                   "\n"
                   "55 23557 7100000.0 0.002 1.71 0.35 0.1 0.0\n")
    dst = tmp_path / "out.csv"
    assert convert_gtoc9_table(src, dst) == 2
    catalog = read_ephemeris(dst)
    assert sorted(catalog) == [23, 55]
    with open(dst) as fh:
        assert next(csv.reader(fh))[0] == "id"
