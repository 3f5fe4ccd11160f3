"""Executable user/reader attack scenarios and the battery-drain flood.

A scenario names who holds the reader (honest user, malicious insider or
outside attacker), what kind of reader it is and which mode it is used in,
plus the preconditions an attacker needs. Running it yields one outcome:

* ``success``: every command ran and every stored record verifies;
* ``detectable-in-audit``: commands ran but a stored record fails verification;
* ``reject(<reason>)``: the run aborted with that reason.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Optional

from . import wire
from .entities import AUTH_STEPS, Executed, ReaderKind
from .flash import AuditEntry, audit_dump
from .netsim import Channel
from .protocol import (
    Ecosystem,
    EcosystemConfig,
    build_ecosystem,
    run_bedside_session,
    run_dh_handshake,
    run_main_phase,
    run_offline_pairing,
    run_reader_card_auth,
    run_session_key_establishment,
    run_user_auth,
)
from .types import Command, CommandKind, EntityId, Nonce, ProtocolFailure, Reason

SAFE = Command(CommandKind.READ_STATUS, 0)
HARMFUL = Command(CommandKind.WRITE_THERAPY, 250)
INTENDED = Command(CommandKind.WRITE_THERAPY, 90)

USERS = ("honest", "malicious", "attacker")
MODES = ("online", "offline", "bedside", "remote")


@dataclass(frozen=True)
class Scenario:
    name: str
    user: str
    reader_kind: ReaderKind
    mode: str = "online"  # see MODES
    expected: str = "success"
    description: str = ""
    reported: bool = False  # hacked reader already on the CRL
    touch: bool = True  # physical contact for OOB pairing
    card_valid: bool = True
    pin_correct: bool = True
    in_zone: bool = True
    in_hours: bool = True
    card_revoked: bool = False
    tokens_expired: bool = False
    offline_nr: bool = True  # offline sessions carry card signatures

    def __post_init__(self):
        if self.user not in USERS:
            raise ValueError(f"unknown user kind {self.user!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def variant(self, **changes) -> "Scenario":
        return replace(self, **changes)


SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in (
        Scenario("S1", "malicious", ReaderKind.VALID, expected="success",
                 description="valid reader; an insider's write is stored with a verifying signature"),
        Scenario("S2", "attacker", ReaderKind.STOLEN, expected="reject(cert-revoked)",
                 description="reader reported stolen; refused at the server handshake"),
        Scenario("S3", "honest", ReaderKind.HACKED, expected="detectable-in-audit",
                 description="honest user on a hacked reader that rewrites CMD under the card's signature"),
        Scenario("S4", "malicious", ReaderKind.HACKED, expected="detectable-in-audit",
                 description="insider on an unreported hacked reader swaps in a signature of a harmless command"),
        Scenario("S5", "malicious", ReaderKind.FORGED, expected="reject(cert-invalid)",
                 description="insider on a forged reader; no server key, so online access fails"),
        Scenario("S6", "attacker", ReaderKind.VALID, expected="success",
                 description="attacker holding reader, card and PIN, in the hospital during working hours"),
        Scenario("S7", "attacker", ReaderKind.FORGED, expected="reject(cert-invalid)",
                 description="attacker with a forged reader; online refused"),
    )
}

# Variants that pin down the preconditions each residual-risk row depends on.
VARIANTS: dict[str, Scenario] = {
    "S4-no-hack": SCENARIOS["S4"].variant(name="S4-no-hack", reader_kind=ReaderKind.VALID, expected="success"),
    "S4-expired-tokens": SCENARIOS["S4"].variant(
        name="S4-expired-tokens", tokens_expired=True, expected="reject(token-expired)"
    ),
    "S5-offline": SCENARIOS["S5"].variant(name="S5-offline", mode="offline", expected="detectable-in-audit"),
    "S5-offline-no-touch": SCENARIOS["S5"].variant(
        name="S5-offline-no-touch", mode="offline", touch=False, expected="reject(oob-unavailable)"
    ),
    "S6-stolen-reader": SCENARIOS["S6"].variant(
        name="S6-stolen-reader", reader_kind=ReaderKind.STOLEN, expected="reject(cert-revoked)"
    ),
    "S6-card-expired": SCENARIOS["S6"].variant(name="S6-card-expired", card_valid=False, expected="reject(card-expired)"),
    "S6-wrong-pin": SCENARIOS["S6"].variant(name="S6-wrong-pin", pin_correct=False, expected="reject(pin-mismatch)"),
    "S6-outside-zone": SCENARIOS["S6"].variant(
        name="S6-outside-zone", in_zone=False, expected="reject(privilege-violation)"
    ),
    "S6-off-hours": SCENARIOS["S6"].variant(name="S6-off-hours", in_hours=False, expected="reject(privilege-violation)"),
    "S6-card-revoked": SCENARIOS["S6"].variant(name="S6-card-revoked", card_revoked=True, expected="reject(card-revoked)"),
    "S7-hacked": SCENARIOS["S7"].variant(
        name="S7-hacked", reader_kind=ReaderKind.HACKED, reported=True, expected="reject(cert-revoked)"
    ),
    "S7-offline-no-touch": SCENARIOS["S7"].variant(
        name="S7-offline-no-touch", mode="offline", touch=False, expected="reject(oob-unavailable)"
    ),
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS.get(name) or VARIANTS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join([*SCENARIOS, *VARIANTS])}") from None


@dataclass
class ScenarioResult:
    scenario: Scenario
    seed: int
    outcome: str
    executed: list[Executed]
    audit: list[AuditEntry]
    trace: str
    detail: str = ""
    flash_dump: bytes = b""
    card_cert: bytes = b""

    @property
    def as_expected(self) -> bool:
        return self.outcome == self.scenario.expected

    @property
    def verdict(self) -> str:
        return "asExpected" if self.as_expected else f"deviation(expected {self.scenario.expected}, got {self.outcome})"

    @property
    def attributable(self) -> bool:
        """Some verifying record names the card for the harmful write that ran."""
        return any(e.ok and e.record.cmd == HARMFUL for e in self.audit)


def _hack(eco: Ecosystem, user: str) -> None:
    """Install the adversary's rewrite hook on a hacked reader."""
    if user == "malicious":
        # Cover tracks: keep the harmful CMD but store a signature made for a harmless one.
        harmless: list[bytes] = []

        def tamper(cmd: Command, sig: bytes) -> tuple[Command, bytes]:
            if not cmd.is_write:
                harmless.append(sig)
                return cmd, sig
            return cmd, harmless[-1] if harmless else sig

    else:
        # Frame the honest user: the card signed INTENDED, the implant receives HARMFUL.
        def tamper(cmd: Command, sig: bytes) -> tuple[Command, bytes]:
            return (HARMFUL if cmd.is_write else cmd), sig

    eco.reader.tamper = tamper


def _config(s: Scenario, seed: int, base: EcosystemConfig) -> EcosystemConfig:
    start, end = base.working_hours
    return replace(
        base,
        seed=seed,
        reader_kind=s.reader_kind,
        reader_zone="hospital" if s.in_zone else "external",
        start_hour=base.start_hour if s.in_hours else (end + 2) % 24,
        card_not_after_ms=base.card_not_after_ms if s.card_valid else 0,
    )


def _commands(s: Scenario) -> list[Command]:
    return [SAFE, INTENDED if s.user == "honest" else HARMFUL]


def _drive(eco: Ecosystem, s: Scenario) -> None:
    if s.mode == "bedside":
        # The server, not the user, picks bedside commands; a write stands in for misuse.
        run_bedside_session(eco, [SAFE] if s.user == "honest" else [SAFE, HARMFUL])
        return
    reader = eco.remote_reader if s.mode == "remote" else eco.reader
    pin = eco.config.pin if s.pin_correct else "0000"
    forged = s.reader_kind is ReaderKind.FORGED and s.mode != "remote"
    # Online always goes through the server; offline skips it without a card session behind the reader.
    card_phases = s.mode != "offline" or (s.offline_nr and not forged)
    if card_phases:
        run_dh_handshake(eco, reader)
        run_reader_card_auth(eco, reader)
        if s.tokens_expired:
            eco.world.advance(max(0, reader.token_lifetime_ms - reader.clock()))
        run_user_auth(eco, pin, reader)
    if s.mode == "offline":
        run_offline_pairing(eco, reader, touch=s.touch, require_card=card_phases)
    else:
        run_session_key_establishment(eco, reader)
    signed = s.mode != "offline" or s.offline_nr
    for cmd in _commands(s):
        run_main_phase(eco, cmd, reader, signed=signed)


def run_scenario(
    scenario: Scenario | str, seed: int = 0, base: EcosystemConfig = EcosystemConfig()
) -> ScenarioResult:
    s = get_scenario(scenario) if isinstance(scenario, str) else scenario
    eco = build_ecosystem(_config(s, seed, base))
    if s.reported:
        eco.revoke(eco.reader.id)
    if s.card_revoked:
        eco.revoke(eco.card.id)
    if s.reader_kind is ReaderKind.HACKED:
        _hack(eco, s.user)
    detail = ""
    try:
        _drive(eco, s)
    except ProtocolFailure as exc:
        outcome = f"reject({exc.reason.value})"
        detail = str(exc)
    else:
        outcome = None
    card = eco.remote_card if s.mode == "remote" else eco.card
    audit = audit_dump(eco.implant.flash.dump(), card.certificate.public_key, eco.suite)
    if outcome is None:
        outcome = "success" if all(e.ok for e in audit) else "detectable-in-audit"
    return ScenarioResult(
        s, seed, outcome, list(eco.implant.executed), audit, eco.world.export_trace(), detail,
        flash_dump=eco.implant.flash.dump(), card_cert=wire.CERT.pack(card.certificate),
    )


# -- battery-drain flood -------------------------------------------------------------


@dataclass(frozen=True)
class FloodReport:
    attempts: int
    zpd: bool
    e_auth_uj: float
    battery_delta_j: float  # flood only; the honest session is booked separately
    harvested_uj: float
    deferred: int
    honest_completed: bool = False
    honest_battery_uj: float = 0.0
    honest_pre_auth_battery_uj: float = 0.0

    @property
    def expected_battery_delta_j(self) -> float:
        return 0.0 if self.zpd else self.attempts * self.e_auth_uj * 1e-6


def battery_dos_flood(
    eco: Ecosystem, attempts: int, spacing_ms: int = 5_000, honest_at: Optional[int] = None
) -> FloodReport:
    """Fire ``attempts`` bogus session starts at the implant.

    Each attempt is a reader hello followed by garbage key material, so the
    implant runs its pre-authentication steps and then aborts. With
    ``honest_at`` set, one genuine online session is slotted in after that
    many attempts.
    """
    world, implant = eco.world, eco.implant
    ledger = implant.ledger
    rng = random.Random(f"{world.seed}:flood")
    fake = EntityId.from_name("flooder")
    m_i_len = wire.Blob(wire.MI).size
    m_ri_len = wire.Blob(wire.MRI).size
    log_start = len(ledger.log)
    rejections_before = len(world.rejections)
    honest = (0, 0)

    def burst() -> None:
        hello = wire.SkHello(fake, Nonce.fresh(rng))
        world.inject(Channel.RF, fake, implant.id, wire.encode_frame(hello))
        bogus = wire.SkKey(rng.randbytes(m_i_len), rng.randbytes(m_ri_len))
        world.inject(Channel.RF, fake, implant.id, wire.encode_frame(bogus), delay_ms=3)

    for i in range(attempts):
        if honest_at is not None and i == honest_at:
            world.run_until_quiescent()
            mark = len(ledger.log)
            run_dh_handshake(eco)
            run_reader_card_auth(eco)
            run_user_auth(eco, eco.config.pin)
            run_session_key_establishment(eco)
            run_main_phase(eco, SAFE)
            honest = (mark, len(ledger.log))
            world.advance(spacing_ms)
        burst()
        world.advance(spacing_ms)
    world.run_until_quiescent()

    in_honest = lambda k: honest[0] <= k < honest[1]  # noqa: E731
    flood = [sp for k, sp in enumerate(ledger.log[log_start:], start=log_start) if not in_honest(k)]
    mine = ledger.log[honest[0] : honest[1]]
    deferred = sum(1 for r in world.rejections[rejections_before:] if r.reason is Reason.ENERGY_DEFERRED)
    return FloodReport(
        attempts=attempts,
        zpd=ledger.zpd,
        e_auth_uj=implant.e_auth_uj,
        battery_delta_j=math.fsum(sp.uj for sp in flood if sp.source == "battery") / 1e6,
        harvested_uj=math.fsum(sp.uj for sp in flood if sp.source == "harvested"),
        deferred=deferred,
        honest_completed=honest != (0, 0),
        honest_battery_uj=math.fsum(sp.uj for sp in mine if sp.source == "battery"),
        honest_pre_auth_battery_uj=math.fsum(
            sp.uj for sp in mine if sp.source == "battery" and sp.step in AUTH_STEPS + ("auth_abort",)
        ),
    )
