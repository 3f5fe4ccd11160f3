"""The nine acceptance criteria, each at its stated tolerance.

Every test records a single PASS/FAIL line; the lines are printed together
in the terminal summary.
"""

import random
import time

import pytest

from imdsec.cli import cmd_energy_report
from imdsec.energy import BATTERY_AH, SECURE_CLASSES, SecurityClass, auth_energy, default_cost_table, lifetime_spread, overhead_percent
from imdsec.entities import Mode
from imdsec.flash import DEFAULT_FLASH_BYTES, SignatureFlash, SignatureRecord, overwrite_attempts
from imdsec.netsim import Adversary, random_policy
from imdsec.properties import PHASES, run_phase, run_trace
from imdsec.protocol import (
    EcosystemConfig,
    build_ecosystem,
    run_bedside_session,
    run_dh_handshake,
    run_main_phase,
    run_offline_mode,
    run_offline_mode_no_nr,
    run_offline_pairing,
    run_online_session,
    run_reader_card_auth,
    run_user_auth,
)
from imdsec.report import EnergyRow, from_csv
from imdsec.scenarios import SCENARIOS, battery_dos_flood, run_scenario
from imdsec.types import Command, CommandKind, EntityId, Nonce, ProtocolFailure, Reason

HW, SW, NONE = SecurityClass.HW_AES, SecurityClass.SW_AES, SecurityClass.NONE

PUBLISHED = {
    NONE: (16.61, 2.17, 16.60),
    HW: (108.31, 15.73, 17.69),
    SW: (217.89, 58.99, 19.89),
}
STATED_OVERWRITE_ATTEMPTS = 456
SEEDS = (0, 1, 2, 3, 4)
TRACES_PER_PHASE = 1000


def within(value, target, rel):
    return abs(value - target) <= rel * abs(target)


def test_criterion_1_energy_calibration(verdict):
    t0 = time.perf_counter()
    table = default_cost_table()
    text = cmd_energy_report(table, [NONE, HW, SW], "csv")
    rows = {SecurityClass(r.security): r for r in from_csv(text.split("\n\n")[0], EnergyRow)}
    elapsed = time.perf_counter() - t0
    misses = []
    for c, (uj, ms, j) in PUBLISHED.items():
        r = rows[c]
        for name, got, want in (("session", r.session_uj, uj), ("delay", r.delay_ms, ms), ("daily", r.daily_j, j)):
            if not within(got, want, 0.01):
                misses.append(f"{c.value} {name} {got:.3f} vs {want}")
    e_hw, e_sw = auth_energy(table, HW), auth_energy(table, SW)
    ok = not misses and e_hw == 59.6 and e_sw == 119.4 and elapsed < 1.0
    detail = f"session figures within 1%, E_auth {e_hw}/{e_sw} uJ, {elapsed:.3f} s" + ("; " + "; ".join(misses) if misses else "")
    verdict(1, ok, detail)


def test_criterion_2_overhead(verdict):
    table = default_cost_table()
    hw, sw = overhead_percent(table, HW), overhead_percent(table, SW)
    ok = abs(hw - 6.57) <= 0.1 and abs(sw - 19.82) <= 0.1 and hw < 7.0
    verdict(2, ok, f"HW {hw:.3f}% (6.57 +/- 0.1), SW {sw:.3f}% (19.82 +/- 0.1)")


def test_criterion_3_zpd_flood(verdict):
    t0 = time.perf_counter()
    reports = {}
    for zpd in (True, False):
        eco = build_ecosystem(EcosystemConfig(seed=1, zpd=zpd, keep_trace=False, event_budget=10**7))
        reports[zpd] = battery_dos_flood(eco, 10_000)
    elapsed = time.perf_counter() - t0
    on, off = reports[True], reports[False]
    want_off = 10_000 * off.e_auth_uj * 1e-6
    ok = on.battery_delta_j == 0.0 and off.battery_delta_j == pytest.approx(want_off, rel=1e-9) and elapsed < 30
    verdict(3, ok, f"ZPD on {on.battery_delta_j} J, off {off.battery_delta_j:.6f} J (want {want_off:.6f}), {elapsed:.1f} s")


def test_criterion_4_signature_records(verdict):
    rec = SignatureRecord(bytes(48), Command(CommandKind.WRITE_THERAPY, 1), EntityId.from_name("c"), Nonce(1), Nonce(2))
    size = len(rec.to_bytes())
    capacity = SignatureFlash(DEFAULT_FLASH_BYTES).capacity
    measured = overwrite_attempts(DEFAULT_FLASH_BYTES)
    ok = size == 72 and capacity == 455 and measured in (455, 456)
    verdict(4, ok, f"record {size} B, capacity {capacity}, overwrite attempts measured {measured} vs stated {STATED_OVERWRITE_ATTEMPTS}")


def test_criterion_5_scenario_matrix(verdict):
    t0 = time.perf_counter()
    bad = []
    for name in SCENARIOS:
        for seed in SEEDS:
            r = run_scenario(name, seed)
            if not r.as_expected:
                bad.append(f"{name}/{seed}: {r.outcome}")
    elapsed = time.perf_counter() - t0
    verdict(5, not bad and elapsed < 60,
            f"{len(SCENARIOS)} scenarios x {len(SEEDS)} seeds, {len(bad)} deviations, {elapsed:.1f} s" + (f" {bad}" if bad else ""))


def test_criterion_6_security_properties(verdict):
    parts, violations = [], []
    for phase in PHASES:
        rep = run_phase(phase, TRACES_PER_PHASE)
        violations += rep.violations
        parts.append(f"{phase}:{rep.traces}")
    counts = {}
    for v in violations:
        counts[v.check] = counts.get(v.check, 0) + 1
    first = f" first: {violations[0]}" if violations else ""
    verdict(6, not violations, f"traces {' '.join(parts)}, violations {counts or 0}{first}")


def _offline_needs_oob():
    eco = build_ecosystem(EcosystemConfig(seed=31))
    run_dh_handshake(eco)
    run_reader_card_auth(eco)
    run_user_auth(eco, eco.config.pin)
    try:
        run_offline_pairing(eco, touch=False)
        return False
    except ProtocolFailure:
        pass
    if eco.implant.session is not None:
        return False
    run_offline_pairing(eco, touch=True)
    return eco.implant.session is not None and eco.implant.session.mode is Mode.OFFLINE


def _bedside_read_only():
    eco = build_ecosystem(EcosystemConfig(seed=32))
    plan = [Command(k, 0) for k in CommandKind if k is not CommandKind.FINISH]
    try:
        run_bedside_session(eco, plan)
    except ProtocolFailure as exc:
        if exc.reason is not Reason.PRIVILEGE_VIOLATION:
            return False
    bedside = [x for x in eco.implant.executed if x.mode is Mode.BEDSIDE]
    return bool(bedside) and all(not x.cmd.is_write for x in bedside)


def _nr_offline_walk(events=10_000):
    adv = Adversary(random_policy(0.1, 0.1, 0.1, 0.05, 0.05), rng=random.Random(33))
    eco = build_ecosystem(EcosystemConfig(seed=33, event_budget=10**6, keep_trace=False), adv)
    world, implant = eco.world, eco.implant
    flag = implant.nr_offline
    states = 0
    original = world.step

    def checked_step():
        nonlocal states
        more = original()
        states += 1
        if implant.nr_offline is not flag:
            raise AssertionError("nrOffline changed")
        return more

    world.step = checked_step
    rng = random.Random(33)
    cmds = [Command(CommandKind.READ_STATUS, 0), Command(CommandKind.WRITE_THERAPY, 80)]
    steps = [
        lambda: run_online_session(eco, [rng.choice(cmds)]),
        lambda: run_offline_mode(eco, [rng.choice(cmds)]),
        lambda: run_offline_mode_no_nr(eco, [rng.choice(cmds)]),
        lambda: run_main_phase(eco, rng.choice(cmds)),
        lambda: run_bedside_session(eco, cmds[:1]),
    ]
    while world.events_processed < events:
        try:
            rng.choice(steps)()
        except ProtocolFailure:
            pass
        world.advance(rng.randrange(1_000, 10_000))
    return states, implant.nr_offline is flag


def test_criterion_7_mode_gating(verdict):
    oob = _offline_needs_oob()
    bedside = _bedside_read_only()
    states, invariant = _nr_offline_walk()
    ok = oob and bedside and invariant and states >= 10_000
    verdict(7, ok, f"offline needs OOB {oob}, bedside read-only {bedside}, nrOffline fixed over {states} events {invariant}")


def test_criterion_8_determinism(verdict):
    same = []
    for name in SCENARIOS:
        a, b = run_scenario(name, 77), run_scenario(name, 77)
        same.append(a.trace.encode() == b.trace.encode() and a.flash_dump == b.flash_dump)
    for phase in PHASES:
        a, b = run_trace(phase, 78), run_trace(phase, 78)
        same.append((a.mode, a.reached, a.completions, a.executed) == (b.mode, b.reached, b.completions, b.executed))
    verdict(8, all(same), f"{sum(same)}/{len(same)} repeated runs byte-identical")


def test_criterion_9_lifetime_ordering(verdict):
    table = default_cost_table()
    bad, worst = [], 0.0
    for ah in BATTERY_AH:
        life = {c: lifetime_spread(table, c, ah) for c in (NONE, *SECURE_CLASSES)}
        for stat in ("days_min", "days_median", "days_max"):
            n, h, s = (getattr(life[c], stat) for c in (NONE, HW, SW))
            if not (n >= h > s):
                bad.append(f"{ah} Ah {stat}")
        # One session a day is the most frequent rate, hence the shortest lifetime.
        worst = max(worst, (1 - life[HW].days_min / life[NONE].days_min) * 100)
    verdict(9, not bad and worst <= 7.0, f"{len(BATTERY_AH)} capacities ordered, worst daily-session HW penalty {worst:.2f}%"
            + (f" {bad}" if bad else ""))
