"""Threat-model scenarios and the battery-drain flood."""

import pytest

from imdsec.energy import SecurityClass
from imdsec.entities import ReaderKind
from imdsec.protocol import EcosystemConfig, build_ecosystem
from imdsec.scenarios import HARMFUL, SCENARIOS, VARIANTS, Scenario, battery_dos_flood, get_scenario, run_scenario

EXPECTED = {
    "S1": "success",
    "S2": "reject(cert-revoked)",
    "S3": "detectable-in-audit",
    "S4": "detectable-in-audit",
    "S5": "reject(cert-invalid)",
    "S6": "success",
    "S7": "reject(cert-invalid)",
}


def test_matrix_table_itself():
    assert {k: s.expected for k, s in SCENARIOS.items()} == EXPECTED


@pytest.mark.parametrize("name", sorted(SCENARIOS))
@pytest.mark.parametrize("seed", [0, 17])
def test_scenario_verdict(name, seed):
    r = run_scenario(name, seed)
    assert r.outcome == EXPECTED[name], r.detail


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_variant_verdict(name):
    r = run_scenario(name, 3)
    assert r.as_expected, r.verdict + " " + r.detail


def test_s1_write_attributable():
    r = run_scenario("S1", 1)
    assert r.attributable
    assert all(e.ok for e in r.audit) and len(r.audit) == 1


def test_s3_audit_pinpoints_the_mismatch():
    r = run_scenario("S3", 2)
    bad = [e for e in r.audit if not e.ok]
    assert len(bad) == 1
    executed_writes = [x.cmd for x in r.executed if x.cmd.is_write]
    assert bad[0].record.cmd in executed_writes


def test_stolen_reader_executes_nothing():
    r = run_scenario("S2", 4)
    assert r.executed == [] and r.audit == []


def test_trace_is_reproducible():
    assert run_scenario("S4", 9).trace == run_scenario("S4", 9).trace


def test_unknown_scenario():
    with pytest.raises(KeyError):
        get_scenario("S8")
    with pytest.raises(ValueError):
        Scenario("X", "alien", ReaderKind.VALID)


def test_harmful_command_reaches_implant_on_success():
    r = run_scenario("S6", 5)
    assert HARMFUL in [x.cmd for x in r.executed]


# -- flood --


@pytest.mark.parametrize("security", [SecurityClass.HW_AES, SecurityClass.SW_AES])
def test_flood_with_zpd_spares_battery(security):
    eco = build_ecosystem(EcosystemConfig(seed=1, security=security, keep_trace=False))
    rep = battery_dos_flood(eco, 500)
    assert rep.battery_delta_j == 0.0
    assert rep.harvested_uj == pytest.approx(500 * rep.e_auth_uj)
    assert rep.deferred == 0


def test_flood_without_zpd_drains_e_auth_each():
    eco = build_ecosystem(EcosystemConfig(seed=1, zpd=False, keep_trace=False))
    rep = battery_dos_flood(eco, 500)
    assert rep.battery_delta_j == pytest.approx(rep.expected_battery_delta_j, rel=1e-12)
    assert rep.harvested_uj == 0.0


def test_honest_session_inside_flood():
    eco = build_ecosystem(EcosystemConfig(seed=2, keep_trace=False))
    rep = battery_dos_flood(eco, 200, honest_at=100)
    assert rep.honest_completed
    assert rep.honest_pre_auth_battery_uj == 0.0
    assert rep.battery_delta_j == 0.0


def test_fast_flood_is_deferred_not_billed():
    # Spacing below the pool's refill time starves the harvester; the implant defers.
    eco = build_ecosystem(EcosystemConfig(seed=3, keep_trace=False))
    rep = battery_dos_flood(eco, 50, spacing_ms=100)
    assert rep.deferred > 0
    assert rep.battery_delta_j == 0.0
