import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evbotnet import demand as dm
from evbotnet.demand import (
    COMMERCIAL_DAY,
    RESIDENTIAL_FCDC,
    DemandProfile,
    EvSession,
    HeatPumpSpec,
)


def test_step_of():
    assert dm.step_of("07:00") == 28
    assert dm.step_of("19:00", 60) == 19
    with pytest.raises(ValueError):
        dm.step_of("07:10", 15)


# ---------------------------------------------------------------- EV charging


def test_full_battery_draws_nothing():
    s = EvSession("a", 0, 0, 10, soc_init=1.0, max_kw=50)
    prof = dm.ev_fleet_profile([s], 2, 10)
    assert not prof.p_mw.any()


def test_fast_charge_hand_arithmetic():
    # 36 kWh x (1 - 0.25) = 27 kWh; 50 kW for 15 min is 12.5 kWh
    s = EvSession("a", 0, 0, 10, soc_init=0.25, max_kw=50)
    kwh = dm.ev_charging_kwh(s, 10)
    assert list(kwh[:4]) == [12.5, 12.5, 2.0, 0.0]
    assert list(dm.ev_charging_kw(s, 10)[:3]) == [50.0, 50.0, 8.0]
    assert kwh.sum() == 27.0


def test_hundred_forced_sessions_make_five_mw():
    sessions = [EvSession(f"v{i}", 3, 10, 20, soc_init=0.25, max_kw=50) for i in range(100)]
    prof = dm.ev_fleet_profile(sessions, 5, 24)
    assert prof.p_mw[3, 10] == pytest.approx(5.0, abs=1e-12)
    assert prof.p_mw[3, 9] == 0


def test_session_on_unknown_bus():
    with pytest.raises(KeyError):
        dm.ev_fleet_profile([EvSession("a", 9, 0, 4, 0.2)], 3, 4)


def test_session_validation():
    with pytest.raises(ValueError):
        EvSession("a", 0, 5, 5, 0.2)
    with pytest.raises(ValueError):
        EvSession("a", 0, 0, 5, 0.9, target_soc=0.8)
    with pytest.raises(ValueError):
        EvSession("a", 0, 0, 5, 0.2, max_kw=0)


sessions_st = st.builds(
    EvSession,
    vehicle_id=st.just("v"),
    bus=st.just(0),
    arrival=st.integers(0, 40),
    departure=st.integers(41, 96),
    soc_init=st.floats(0, 1),
    battery_kwh=st.floats(1, 120),
    max_kw=st.floats(0.5, 350),
)


@settings(max_examples=300, deadline=None)
@given(sessions_st, st.sampled_from([1, 5, 10, 15, 20, 30, 60]))
def test_energy_conservation(s, dt):
    kwh = dm.ev_charging_kwh(s, 96, dt)
    delivered = sum(Fraction(x) for x in kwh)
    capacity = s.max_kw * dt / 60 * (s.departure - s.start)
    if capacity >= s.energy_needed_kwh * (1 + 1e-12):
        assert delivered == Fraction(s.energy_needed_kwh)
    else:
        assert delivered <= Fraction(s.energy_needed_kwh)
    kw = dm.ev_charging_kw(s, 96, dt)
    assert np.all(kw <= s.max_kw) and np.all(kw >= 0)
    assert not kw[:s.start].any() and not kw[s.departure:].any()


def test_energy_short_stay_is_partial():
    s = EvSession("a", 0, 0, 1, soc_init=0.2, max_kw=11)
    assert dm.ev_charging_kwh(s, 4).sum() == pytest.approx(2.75)


# ---------------------------------------------------------------- parking sessions


def _max_concurrency(sessions, horizon):
    occ = np.zeros(horizon, dtype=int)
    for s in sessions:
        occ[s.arrival:s.departure] += 1
    return occ.max(initial=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 80),
       st.sampled_from([COMMERCIAL_DAY, RESIDENTIAL_FCDC, dm.RESIDENTIAL_HOME]))
def test_concurrency_bound(seed, n, model):
    sessions = dm.generate_parking_sessions(seed, n, 4, model)
    assert _max_concurrency(sessions, 96) <= n
    prof = dm.ev_fleet_profile(sessions, 5, 96)
    assert prof.p_mw.max() <= n * 0.05 + 1e-12


def test_fifty_station_lot_bound():
    for seed in range(20):
        assert _max_concurrency(dm.generate_parking_sessions(seed, 50, 0), 96) <= 50


def test_sessions_deterministic(tmp_path):
    a = dm.generate_parking_sessions(7, 50, 16, RESIDENTIAL_FCDC)
    b = dm.generate_parking_sessions(7, 50, 16, RESIDENTIAL_FCDC)
    assert a == b
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    dm.write_sessions_csv(pa, a)
    dm.write_sessions_csv(pb, b)
    assert pa.read_bytes() == pb.read_bytes()


def test_soc_mean():
    soc = [s.soc_init for seed in range(200)
           for s in dm.generate_parking_sessions(seed, 50, 0)]
    assert len(soc) == 10_000
    assert 0.245 <= float(np.mean(soc)) <= 0.255
    assert 0.2 <= min(soc) and max(soc) <= 0.3


def test_session_csv_round_trip(tmp_path):
    sessions = dm.generate_parking_sessions(3, 10, 16, RESIDENTIAL_FCDC)
    path = tmp_path / "s.csv"
    dm.write_sessions_csv(path, sessions)
    header = path.read_text().splitlines()[0]
    assert header == "vehicle_id,bus,arrival_step,departure_step,soc_init"
    back = dm.read_sessions_csv(path)
    assert [(s.vehicle_id, s.bus, s.arrival, s.departure, s.soc_init) for s in back] == [
        (s.vehicle_id, s.bus, s.arrival, s.departure, s.soc_init) for s in sessions
    ]


def test_session_csv_missing_column(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("vehicle_id,bus,arrival_step\nv,1,2\n")
    with pytest.raises(ValueError, match="missing"):
        dm.read_sessions_csv(path)


# ---------------------------------------------------------------- heat pumps


def test_heat_pump_idle_in_deadband():
    spec = HeatPumpSpec(bus=0, t_init=21.0)
    temps, kw = dm.simulate_heat_pump(spec, np.full(96, 21.0))
    assert not kw.any()
    assert np.allclose(temps, 21.0)


def test_cop_arithmetic():
    assert dm.hp_electrical_kw(4.4, 2.2) == pytest.approx(2.0)


def test_doubling_cop_halves_electrical():
    thermal = np.array([0.0, 4.4, 8.8, 13.2])
    a = dm.hp_electrical_kw(thermal, 2.2)
    b = dm.hp_electrical_kw(thermal, 4.4)
    assert np.allclose(b, a / 2)


@settings(max_examples=30, deadline=None)
@given(st.floats(1500, 2500), st.floats(-20, 10), st.sampled_from([5, 15, 30]))
def test_indoor_temperature_band(area, t_out, dt):
    spec = HeatPumpSpec(bus=0, floor_area=area, rated_kw=12.0)
    temps, kw = dm.simulate_heat_pump(spec, np.full(400, t_out), dt)
    # one step of drift either way, from the largest possible rate of change
    dt_h = dt / 60
    rate = (spec.rated_kw * spec.cop + spec.ua_kw_per_c * 45) / spec.capacitance_kwh_per_c
    eps = rate * dt_h
    steady = temps[len(temps) // 2:]
    assert steady.min() >= spec.setpoint_low - eps
    assert steady.max() <= spec.setpoint_high + eps
    assert np.all(kw >= 0) and np.all(kw <= spec.rated_kw)


def test_heat_pump_profile_non_negative(net33):
    specs = dm.generate_heat_pumps(1, range(1, 33), 3)
    prof = dm.heat_pump_profile(specs, dm.outdoor_temperature(96), net33.n_bus)
    assert prof.p_mw.min() >= 0 and prof.p_mw.max() > 0


# ---------------------------------------------------------------- composition


def test_compose_identity(net33):
    base = dm.base_profile(net33)
    out = dm.compose(base, [])
    assert np.array_equal(out.p_mw, base.p_mw) and np.array_equal(out.q_mvar, base.q_mvar)


def test_compose_order_independent(net33):
    base = dm.base_profile(net33)
    a = dm.heat_pump_profile(dm.generate_heat_pumps(1, [5, 6], 4), dm.outdoor_temperature(96),
                             33)
    b = dm.ev_fleet_profile(dm.generate_parking_sessions(2, 20, 17, RESIDENTIAL_FCDC), 33, 96)
    assert np.allclose(dm.compose(base, [a, b]).p_mw, dm.compose(base, [b, a]).p_mw,
                       rtol=0, atol=1e-15)


def test_compose_mismatch(net33):
    base = dm.base_profile(net33)
    with pytest.raises(ValueError):
        dm.compose(base, [DemandProfile.zeros(33, 48)])
    with pytest.raises(ValueError):
        dm.compose(base, [DemandProfile.zeros(33, 96, 30)])


def test_flexible_load_adds_at_seven(net33):
    t = dm.step_of("07:00")
    base = dm.base_profile(net33)
    hp = dm.heat_pump_profile(dm.generate_heat_pumps(1, range(1, 33), 14),
                              dm.outdoor_temperature(96), 33)
    sessions = dm.generate_parking_sessions(1, 50, 16, RESIDENTIAL_FCDC)
    sessions = [EvSession(s.vehicle_id, s.bus, t, t + 4, s.soc_init, max_kw=50)
                for s in sessions]
    ev = dm.ev_fleet_profile(sessions, 33, 96)
    total = dm.compose(base, [hp, ev])
    flexible = np.flatnonzero((hp.p_mw[:, t] + ev.p_mw[:, t]) > 0)
    assert 16 in flexible
    assert np.all(total.p_mw[flexible, t] > base.p_mw[flexible, t])


def test_base_profile_shape(net33):
    prof = dm.base_profile(net33, 24, 60)
    assert prof.total_mw()[19] == pytest.approx(net33.total_load())
    assert prof.total_mw()[7] == pytest.approx(0.72 * net33.total_load())
    flat = dm.base_profile(net33, 4, 60, shape=None)
    assert np.allclose(flat.p_mw, net33.p_load[:, None])
    assert math.isclose(flat.q_mvar[5, 0], net33.q_load[5])
