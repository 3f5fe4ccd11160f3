"""Ecosystem construction and synchronous drivers for each protocol phase.

Every ``run_*`` call kicks one phase off on the acting entity, steps the world
until that phase settles, and either returns the phase result or raises
:class:`ProtocolFailure` with the reason of the first check that failed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .crypto import CryptoSuite, KeyPair
from .energy import CostTable, SecurityClass, default_cost_table
from .entities import (
    DEFAULT_TOKEN_LIFETIME_MS,
    STATUS_OK,
    AnswerRecord,
    HospitalServer,
    Implant,
    ManufacturerServer,
    NetworkPolicy,
    Reader,
    ReaderKind,
    SmartCard,
)
from .flash import DEFAULT_FLASH_BYTES, SignatureRecord
from .netsim import DEFAULT_ADVERSARIAL, DEFAULT_EVENT_BUDGET, HOUR_MS, Adversary, World
from .pki import NEVER, CertificateAuthority, self_signed
from .puzzle import DEFAULT_EXPIRY_MS, Puzzle, PuzzleSolution, issue_puzzle, solve_puzzle, verify_puzzle
from .types import Command, EntityId, KeyRole, Privilege, ProtocolFailure, Reason, SymmetricKey
from . import wire

INFORMATIONAL = frozenset({Reason.NETWORK_POLICY})


@dataclass
class EcosystemConfig:
    seed: int = 0
    security: SecurityClass = SecurityClass.HW_AES
    token_lifetime_ms: int = DEFAULT_TOKEN_LIFETIME_MS
    flash_bytes: int = DEFAULT_FLASH_BYTES
    nr_offline: bool = True
    zpd: bool = True
    puzzle_k: int = 10
    background_load: int = 0
    load_threshold: int = 100
    puzzle_expiry_ms: int = DEFAULT_EXPIRY_MS
    card_privilege: Privilege = Privilege.READ_WRITE
    card_not_after_ms: int = NEVER
    pin: str = "2468"
    reader_kind: ReaderKind = ReaderKind.VALID
    reader_zone: str = "hospital"
    start_hour: int = 9
    working_hours: tuple[int, int] = (8, 18)
    chunk_bytes: int = wire.DEFAULT_CHUNK_BYTES
    cost_table: Optional[CostTable] = None
    adversarial: frozenset = DEFAULT_ADVERSARIAL
    event_budget: int = DEFAULT_EVENT_BUDGET
    keep_trace: bool = True


@dataclass
class Ecosystem:
    config: EcosystemConfig
    world: World
    ca: CertificateAuthority
    server: HospitalServer
    remote_server: HospitalServer
    manufacturer: ManufacturerServer
    implant: Implant
    reader: Reader
    card: SmartCard
    bedside_reader: Reader
    remote_reader: Reader
    remote_card: SmartCard
    cost_table: CostTable
    suite: CryptoSuite = field(default_factory=CryptoSuite)

    def touch(self, implant: Optional[Implant] = None) -> None:
        """The clinician places the reader on the patient's skin."""
        (implant or self.implant).touch()

    def revoke(self, eid: EntityId) -> None:
        self.server.crl.add(eid)
        self.remote_server.crl.add(eid)

    def records(self, implant: Optional[Implant] = None) -> list[SignatureRecord]:
        return (implant or self.implant).flash.records()


def _card(
    world: World, ca: CertificateAuthority, suite: CryptoSuite, name: str, privilege: Privilege, pin: str, not_after: int
) -> tuple[SmartCard, SymmetricKey]:
    rng = world.rng_for(name)
    eid = EntityId.from_name(name)
    kp = KeyPair.generate(rng)
    k_sc = SymmetricKey.fresh(rng, KeyRole.PRESHARED_SC)
    card = SmartCard(eid, rng, suite, k_sc, kp, ca.issue(eid, kp.public, privilege, not_after), pin)
    world.add(card)
    return card, k_sc


def _reader(
    world: World,
    ca: CertificateAuthority,
    suite: CryptoSuite,
    name: str,
    server_id: EntityId,
    kind: ReaderKind = ReaderKind.VALID,
    zone: str = "hospital",
    bedside: bool = False,
) -> Reader:
    rng = world.rng_for(name)
    eid = EntityId.from_name(name)
    kp = KeyPair.generate(rng)
    cert = self_signed(kp, eid, suite) if kind is ReaderKind.FORGED else ca.issue(eid, kp.public)
    reader = Reader(eid, rng, suite, ca.public_key, kp, cert, server_id, kind=kind, bedside=bedside, zone=zone)
    world.add(reader)
    return reader


def _server(world: World, ca: CertificateAuthority, suite: CryptoSuite, name: str, cfg: EcosystemConfig) -> HospitalServer:
    rng = world.rng_for(name)
    eid = EntityId.from_name(name)
    kp = KeyPair.generate(rng)
    server = HospitalServer(
        eid, rng, suite, ca.public_key, kp, ca.issue(eid, kp.public),
        token_lifetime_ms=cfg.token_lifetime_ms, puzzle_k=cfg.puzzle_k, load_threshold=cfg.load_threshold,
        puzzle_expiry_ms=cfg.puzzle_expiry_ms, policy=NetworkPolicy(default_hours=tuple(cfg.working_hours)),
    )
    server.background_load = cfg.background_load
    world.add(server)
    return server


def build_ecosystem(config: EcosystemConfig = EcosystemConfig(), adversary: Optional[Adversary] = None) -> Ecosystem:
    """Two hospitals, a manufacturer, one implant homed at the local hospital, and one reader/card pair each."""
    cfg = config
    suite = CryptoSuite()
    world = World(
        seed=cfg.seed, adversary=adversary, adversarial=cfg.adversarial, event_budget=cfg.event_budget,
        epoch_ms=cfg.start_hour * HOUR_MS, suite=suite, keep_trace=cfg.keep_trace,
    )
    table = cfg.cost_table or default_cost_table()
    ca = CertificateAuthority.create(world.rng_for("ca"), suite)

    server = _server(world, ca, suite, "hospital-L", cfg)
    remote = _server(world, ca, suite, "hospital-R", cfg)
    manufacturer = ManufacturerServer(EntityId.from_name("manufacturer"), world.rng_for("manufacturer"), suite)
    world.add(manufacturer)

    link_rng = world.rng_for("server-links")
    for hospital in (server, remote):
        key = SymmetricKey.fresh(link_rng, KeyRole.SERVER_LINK)
        hospital.server_links[manufacturer.id] = key
        hospital.manufacturer_id = manufacturer.id
        manufacturer.server_links[hospital.id] = key

    implant_rng = world.rng_for("imd-1")
    k_si = SymmetricKey.fresh(implant_rng, KeyRole.PRESHARED_SI)
    implant = Implant(
        EntityId.from_name("imd-1"), implant_rng, suite, k_si, table, security=cfg.security,
        nr_offline=cfg.nr_offline, flash_bytes=cfg.flash_bytes, zpd=cfg.zpd,
        session_ttl_ms=cfg.token_lifetime_ms, chunk_bytes=cfg.chunk_bytes,
    )
    world.add(implant)
    server.implants[implant.id] = k_si
    manufacturer.registry[implant.id] = server.id

    card, k_sc = _card(world, ca, suite, "card-1", cfg.card_privilege, cfg.pin, cfg.card_not_after_ms)
    server.cards[card.id] = k_sc
    reader = _reader(world, ca, suite, "reader-1", server.id, cfg.reader_kind, cfg.reader_zone)
    if cfg.reader_kind is ReaderKind.STOLEN:
        server.crl.add(reader.id)

    bedside = _reader(world, ca, suite, "bedside-1", server.id, bedside=True)
    server.bedside_readers.add(bedside.id)

    remote_card, k_rsc = _card(world, ca, suite, "card-R", Privilege.READ_WRITE, cfg.pin, NEVER)
    remote.cards[remote_card.id] = k_rsc
    remote_reader = _reader(world, ca, suite, "reader-R", remote.id)

    world.insert_card(reader.id, card.id)
    world.insert_card(remote_reader.id, remote_card.id)
    return Ecosystem(
        cfg, world, ca, server, remote, manufacturer, implant, reader, card, bedside, remote_reader, remote_card, table, suite
    )


# -- driving -----------------------------------------------------------------------


def _settle(world: World, reader: Reader, phase: str, mark: int) -> None:
    world.run_while(lambda: reader.busy(phase))
    if phase in reader.done:
        return
    reason = reader.failed.get(phase, Reason.TIMEOUT)
    if reason is Reason.TIMEOUT:
        # A silent drop downstream surfaces as a timeout here; report the cause if one was logged.
        for r in world.rejections[mark:]:
            if r.reason not in INFORMATIONAL and r.reason is not Reason.TIMEOUT:
                raise ProtocolFailure(r.reason, f"{r.entity.name}: {r.detail}")
    raise ProtocolFailure(reason, f"{phase} phase")


def _run(eco: Ecosystem, reader: Reader, phase: str, start) -> None:
    mark = len(eco.world.rejections)
    start()
    _settle(eco.world, reader, phase, mark)


def run_dh_handshake(eco: Ecosystem, reader: Optional[Reader] = None) -> SymmetricKey:
    reader = reader or eco.reader
    _run(eco, reader, "dh", reader.connect)
    return reader.k_rs


def run_reader_card_auth(eco: Ecosystem, reader: Optional[Reader] = None) -> tuple[SymmetricKey, int]:
    """Returns the reader's copy of K'_RC and its token lifetime T_L."""
    reader = reader or eco.reader
    _run(eco, reader, "card", reader.authenticate_card)
    return reader.k_rc, reader.token_lifetime_ms


def run_user_auth(eco: Ecosystem, pin: str, reader: Optional[Reader] = None) -> bytes:
    reader = reader or eco.reader
    _run(eco, reader, "user", lambda: reader.verify_pin(pin))
    return reader.m_sc2


def run_session_key_establishment(
    eco: Ecosystem, reader: Optional[Reader] = None, implant: Optional[Implant] = None, retries: int = 0
) -> SymmetricKey:
    reader = reader or eco.reader
    implant = implant or eco.implant
    _run(eco, reader, "session", lambda: reader.establish_session(implant.id, retries))
    return reader.session.key


def run_main_phase(eco: Ecosystem, command: Command, reader: Optional[Reader] = None, signed: bool = True) -> AnswerRecord:
    reader = reader or eco.reader
    _run(eco, reader, "command", lambda: reader.send_command(command, signed))
    return reader.answers[-1]


def imd_store_signature(implant: Implant, record: SignatureRecord) -> int:
    return implant.flash.store(record)


def run_online_session(
    eco: Ecosystem, commands: Sequence[Command], pin: Optional[str] = None, reader: Optional[Reader] = None
) -> list[AnswerRecord]:
    """Phases I to IV end to end."""
    reader = reader or eco.reader
    run_dh_handshake(eco, reader)
    run_reader_card_auth(eco, reader)
    run_user_auth(eco, eco.config.pin if pin is None else pin, reader)
    run_session_key_establishment(eco, reader)
    return [run_main_phase(eco, c, reader) for c in commands]


def run_offline_pairing(eco: Ecosystem, reader: Optional[Reader] = None, touch: bool = True, require_card: bool = True) -> SymmetricKey:
    reader = reader or eco.reader
    if touch:
        eco.touch()
    _run(eco, reader, "session", lambda: reader.pair_offline(eco.implant.id, require_card))
    return reader.session.key


def run_offline_mode(
    eco: Ecosystem, commands: Iterable[Command], reader: Optional[Reader] = None, touch: bool = True
) -> list[AnswerRecord]:
    """Needs tokens from an earlier online reader-card authentication and a PIN check."""
    reader = reader or eco.reader
    run_offline_pairing(eco, reader, touch, require_card=True)
    return [run_main_phase(eco, c, reader) for c in commands]


def run_offline_mode_no_nr(
    eco: Ecosystem, commands: Iterable[Command], reader: Optional[Reader] = None, touch: bool = True
) -> list[AnswerRecord]:
    reader = reader or eco.reader
    run_offline_pairing(eco, reader, touch, require_card=False)
    return [run_main_phase(eco, c, reader, signed=False) for c in commands]


def run_bedside_session(eco: Ecosystem, commands: Sequence[Command]) -> list[tuple[Command, int, bytes]]:
    """The server drives a card-less reader; returns the server's data log for the implant.

    Every command is attempted. If the implant refused any of them, the run
    raises after the log is complete; the log stays on the server.
    """
    reader = eco.bedside_reader
    log: list = []
    eco.server.bedside_plan[eco.implant.id] = list(commands)
    eco.server.bedside_logs[eco.implant.id] = log
    run_dh_handshake(eco, reader)
    mark = len(eco.world.rejections)
    reader.establish_session(eco.implant.id)
    _settle(eco.world, reader, "session", mark)
    eco.world.run_while(lambda: len(log) < len(commands))
    if len(log) < len(commands):
        reasons = [r.reason for r in eco.world.rejections[mark:] if r.reason not in INFORMATIONAL]
        raise ProtocolFailure(reasons[0] if reasons else Reason.TIMEOUT, "bedside run")
    refused = [cmd.kind.name for cmd, status, _ in log if status != STATUS_OK]
    if refused:
        raise ProtocolFailure(Reason.PRIVILEGE_VIOLATION, "refused: " + ", ".join(refused))
    return log


def run_remote_hospital_establishment(eco: Ecosystem, pin: Optional[str] = None) -> SymmetricKey:
    """Card and reader belong to the remote hospital; the implant is homed at the local one."""
    reader = eco.remote_reader
    run_dh_handshake(eco, reader)
    run_reader_card_auth(eco, reader)
    run_user_auth(eco, eco.config.pin if pin is None else pin, reader)
    return run_session_key_establishment(eco, reader)


# -- puzzle helpers on the server's secret -------------------------------------------


def server_issue_puzzle(server: HospitalServer, reader_id: EntityId, now_ms: int) -> Puzzle:
    return issue_puzzle(server.suite, server.k_s, reader_id, now_ms, server.required_difficulty())


def reader_solve_puzzle(puzzle: Puzzle, suite: CryptoSuite = CryptoSuite()) -> PuzzleSolution:
    return solve_puzzle(suite, puzzle)


def server_verify_puzzle(
    server: HospitalServer, reader_id: EntityId, t: int, k: int, solution: bytes, now_ms: int
) -> Optional[Reason]:
    return verify_puzzle(server.suite, server.k_s, reader_id, t, k, solution, now_ms, server.puzzle_expiry_ms)
