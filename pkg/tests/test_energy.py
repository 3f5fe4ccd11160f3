import pytest
from hypothesis import given, strategies as st

from imdsec.energy import (
    BATTERY_AH,
    SECURE_CLASSES,
    EnergyLedger,
    SecurityClass,
    SessionSpec,
    UnknownStep,
    UsageProfile,
    auth_energy,
    calibrate,
    daily_energy,
    default_cost_table,
    estimate_lifetime,
    overhead_percent,
    protocol_delay,
    secure_steps,
    session_energy,
)

T = default_cost_table()
NONE, HW, SW = SecurityClass.NONE, SecurityClass.HW_AES, SecurityClass.SW_AES


@pytest.mark.parametrize("cls,uj", [(NONE, 16.61), (HW, 108.31), (SW, 217.89)])
def test_basic_session_energy(cls, uj):
    assert session_energy(T, cls, SessionSpec.basic(cls)) == pytest.approx(uj, rel=0.01)


@pytest.mark.parametrize("cls,ms", [(NONE, 2.17), (HW, 15.73), (SW, 58.99)])
def test_protocol_delay(cls, ms):
    assert protocol_delay(T, cls) == pytest.approx(ms, rel=0.01)


def test_hw_steps_stay_under_6ms():
    assert max(T.step(HW, p.name).time_ms for p in secure_steps()) <= 6.0


@pytest.mark.parametrize("cls,uj", [(HW, 59.6), (SW, 119.4)])
def test_auth_energy(cls, uj):
    assert round(auth_energy(T, cls), 1) == uj


def test_zero_step_session():
    assert session_energy(T, HW, SessionSpec()) == 0.0
    assert auth_energy(T, NONE) == 0.0


@pytest.mark.parametrize("cls,j,pct", [(NONE, 16.60, 0.0), (HW, 17.69, 6.57), (SW, 19.89, 19.82)])
def test_daily_energy(cls, j, pct):
    assert daily_energy(T, cls) == pytest.approx(j, rel=0.01)
    assert overhead_percent(T, cls) == pytest.approx(pct, abs=0.1)


step_names = st.sampled_from([p.name for p in secure_steps()])
specs = st.builds(SessionSpec, st.lists(step_names, max_size=12).map(tuple), st.lists(st.integers(0, 5000), max_size=3).map(tuple))


@given(specs, specs, st.sampled_from(SECURE_CLASSES))
def test_session_energy_is_additive(a, b, cls):
    assert session_energy(T, cls, a + b) == pytest.approx(session_energy(T, cls, a) + session_energy(T, cls, b), rel=1e-12, abs=1e-9)


def test_unknown_step():
    with pytest.raises(UnknownStep):
        session_energy(T, HW, SessionSpec(("teleport",)))


@pytest.mark.parametrize("ah", BATTERY_AH)
def test_lifetime_ordering(ah):
    p = UsageProfile(battery_capacity_j=ah * 3600 * 2.8)
    none, hw, sw = (estimate_lifetime(T, p, c) for c in (NONE, HW, SW))
    speck = estimate_lifetime(T, p, SecurityClass.SW_SPECK)
    assert none >= hw > sw
    assert sw < speck < hw
    assert (none - hw) / none <= 0.07


@given(st.floats(0.1, 5.0))
def test_lifetime_linear_in_capacity(ah):
    p1 = UsageProfile(battery_capacity_j=ah * 3600 * 2.8)
    p2 = UsageProfile(battery_capacity_j=2 * ah * 3600 * 2.8)
    assert estimate_lifetime(T, p2, HW) == pytest.approx(2 * estimate_lifetime(T, p1, HW))


def test_profile_validation():
    with pytest.raises(ValueError):
        UsageProfile(sessions_per_day=-1)
    with pytest.raises(ValueError):
        estimate_lifetime(T, UsageProfile(battery_capacity_j=0), HW)


def test_shipped_table_matches_fresh_calibration():
    fresh = calibrate()
    for cls in SecurityClass:
        assert session_energy(fresh, cls, SessionSpec.basic(cls)) == pytest.approx(session_energy(T, cls, SessionSpec.basic(cls)))


def test_table_json_roundtrip(tmp_path):
    path = tmp_path / "t.json"
    T.dump(path)
    assert type(T).load(path) == T


@given(st.lists(st.tuples(st.floats(0, 200), st.booleans(), st.integers(0, 10_000)), max_size=40), st.booleans())
def test_ledger_sources(spends, zpd):
    ledger = EnergyLedger(zpd=zpd)
    now = 0
    for uj, pre, dt in spends:
        now += dt
        src = ledger.spend("step", uj, pre, now)
        assert src == ("harvested" if pre and zpd else "battery")
    expected = sum(uj for uj, pre, _ in spends if not (pre and zpd))
    assert ledger.battery_spent_uj == pytest.approx(expected)


@given(st.lists(st.tuples(st.floats(1, 100), st.integers(0, 20_000)), max_size=30))
def test_ledger_harvest_never_exceeds_capacity(reqs):
    ledger = EnergyLedger()
    now = 0
    for uj, dt in reqs:
        now += dt
        before = ledger.harvested_uj
        ok = ledger.reserve(uj, now)
        assert 0 <= ledger.harvested_uj <= ledger.harvest_capacity_uj
        if not ok:
            assert ledger.harvested_uj >= before  # refused reservations take nothing
