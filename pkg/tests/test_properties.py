"""Security-property harness: a small clean run plus checks that each detector can fire."""

from dataclasses import replace

import pytest

from imdsec import wire
from imdsec.entities import Executed, Mode, encode_pin
from imdsec.flash import SignatureRecord
from imdsec.netsim import Adversary, Completion, passive
from imdsec.properties import (
    CHECKS,
    PHASES,
    check_accountability,
    check_agreement,
    check_authorization,
    check_replay,
    check_secrecy,
    run_phase,
    run_trace,
    summarize,
)
from imdsec.protocol import EcosystemConfig, build_ecosystem, run_online_session
from imdsec.types import Command, CommandKind, EntityId, Nonce, Privilege

WRITE = Command(CommandKind.WRITE_THERAPY, 90)


@pytest.fixture
def clean():
    adv = Adversary(passive)
    eco = build_ecosystem(EcosystemConfig(seed=21), adv)
    run_online_session(eco, [WRITE])
    return eco, adv


@pytest.mark.parametrize("phase", PHASES)
def test_small_run_has_no_violations(phase):
    rep = run_phase(phase, traces=40, first_seed=1000, workers=1)
    assert rep.traces == 40
    assert rep.ok, rep.violations[:3]
    assert set(rep.by_check()) == set(CHECKS)


def test_trace_is_deterministic():
    a, b = run_trace("IV", 5), run_trace("IV", 5)
    assert (a.mode, a.reached, a.completions, a.executed) == (b.mode, b.reached, b.completions, b.executed)


def test_later_phases_get_reached():
    rep = summarize("IV", [run_trace("IV", s) for s in range(30)])
    assert rep.reached.get("IV", 0) > 0


def test_unknown_phase():
    with pytest.raises(ValueError):
        run_trace("V", 0)


# -- each detector fires on a planted fault --


def test_clean_session_passes_every_check(clean):
    eco, adv = clean
    assert check_secrecy(adv, eco.world, eco) == []
    assert check_agreement(eco.world) == []
    assert check_authorization(eco) == []
    assert check_accountability(eco) == []
    assert check_replay(eco.world, eco) == []


def test_secrecy_flags_leaked_session_key(clean):
    eco, adv = clean
    adv.knowledge.give_key(eco.server.links[eco.reader.id].key.raw)
    found = check_secrecy(adv, eco.world, eco)
    assert found and any("CMD" in f for f in found)


def test_secrecy_flags_pin(clean):
    eco, adv = clean
    adv.knowledge.atoms.add((wire.PIN.name, encode_pin(eco.config.pin)))
    assert "adversary knows the PIN" in check_secrecy(adv, eco.world, eco)


def test_agreement_flags_one_sided_completion(clean):
    eco, _ = clean
    eco.world.completions.append(Completion("session", eco.implant.id, eco.reader.id, ("forged",)))
    assert check_agreement(eco.world)


def test_agreement_flags_duplicate(clean):
    eco, _ = clean
    eco.world.completions.append(eco.world.completions[-1])
    assert any("twice" in f for f in check_agreement(eco.world))


def test_authorization_flags_overreach(clean):
    eco, _ = clean
    x = eco.implant.executed[-1]
    eco.implant.executed.append(replace(x, cmd=Command(CommandKind.FIRMWARE_UPDATE, 1)))
    assert check_authorization(eco)


def test_authorization_flags_offline_above_cap(clean):
    eco, _ = clean
    x = eco.implant.executed[-1]
    eco.implant.executed.append(replace(x, mode=Mode.OFFLINE, privilege=Privilege.READ_WRITE_FIRMWARE))
    assert check_authorization(eco)


def test_authorization_flags_ungranted(clean):
    eco, _ = clean
    x: Executed = eco.implant.executed[-1]
    eco.implant.executed.append(replace(x, card_id=EntityId.from_name("nobody")))
    assert any("without any grant" in f for f in check_authorization(eco))


def test_accountability_flags_bad_record(clean):
    eco, _ = clean
    (rec,) = eco.records()
    eco.implant.flash.store(replace(rec, cmd=Command(CommandKind.WRITE_THERAPY, 200)))
    assert check_accountability(eco)


def test_accountability_flags_unknown_card(clean):
    eco, _ = clean
    eco.implant.flash.store(SignatureRecord(bytes(48), WRITE, EntityId.from_name("ghost"), Nonce(1), Nonce(2)))
    assert any("unknown card" in f for f in check_accountability(eco))


def test_replay_flags_reexecution(clean):
    eco, _ = clean
    # Disarm the implant's freshness check to show the detector notices.
    eco.implant.session.n_i = Nonce(eco.implant.executed[-1].n_i.value)
    found = check_replay(eco.world, eco)
    assert found and any("executed" in f for f in found)
