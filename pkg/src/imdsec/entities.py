"""The five protocol actors as event-driven state machines.

Each entity reacts to frames delivered by :class:`~imdsec.netsim.World` and to
its own timers. Bad frames are dropped and logged as a rejection with the
reason of the first failing check; nothing else changes state.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import wire
from .crypto import AuthenticationError, CryptoSuite, HandshakeError, KeyPair
from .energy import CostTable, EnergyLedger, SecurityClass, auth_energy, bulk_chunks, secure_steps
from .flash import DEFAULT_FLASH_BYTES, SignatureFlash, SignatureRecord, signed_message
from .netsim import HOUR_MS, PHASE_TIMEOUT_MS, Channel, World
from .puzzle import DEFAULT_EXPIRY_MS, DEFAULT_LOAD_THRESHOLD, issue_puzzle, solve_puzzle, verify_puzzle, Puzzle
from .pki import check_certificate
from .types import (
    ANS_BYTES,
    OFFLINE_PRIVILEGE_CAP,
    SIG_BYTES,
    Certificate,
    Command,
    CommandKind,
    EntityId,
    KeyRole,
    Nonce,
    Privilege,
    ProtocolFailure,
    Reason,
    SymmetricKey,
)

DEFAULT_TOKEN_LIFETIME_MS = 8 * HOUR_MS
PIN_RETRY_LIMIT = 3
PIN_BYTES = 8
STATUS_OK = 0
STATUS_PRIVILEGE_VIOLATION = 1
HELLO_RETRY_MS = 1_000


class Mode(str, enum.Enum):
    ONLINE = "online"
    OFFLINE = "offline"
    BEDSIDE = "bedside"
    REMOTE = "remote"


class ReaderKind(str, enum.Enum):
    VALID = "valid"
    STOLEN = "stolen"
    HACKED = "hacked"
    FORGED = "forged"


def encode_pin(pin: str) -> bytes:
    raw = pin.encode()
    if len(raw) > PIN_BYTES:
        raise ValueError("PIN longer than 8 characters")
    return raw.ljust(PIN_BYTES, b"\x00")


# -- base --------------------------------------------------------------------------


class Entity:
    world: World

    def __init__(self, eid: EntityId, rng: random.Random, suite: CryptoSuite):
        self.id = eid
        self.rng = rng
        self.suite = suite
        self.decode_errors = 0

    @property
    def now(self) -> int:
        return self.world.now_ms

    def send(self, channel: Channel, dst: EntityId, msg: wire.Message) -> None:
        self.world.send(channel, self.id, dst, msg)

    def reject(self, reason: Reason, detail: str = "") -> None:
        self.world.reject(self.id, reason, detail)

    def receive(self, channel: Channel, src: EntityId, frame: bytes) -> None:
        try:
            msg = wire.decode_frame(frame)
        except wire.DecodeError as exc:
            self.decode_errors += 1
            self.reject(Reason.MALFORMED, str(exc))
            return
        handler = getattr(self, "on_" + type(msg).__name__, None)
        if handler is None:
            self.reject(Reason.MALFORMED, f"unexpected {type(msg).__name__}")
            return
        handler(channel, src, msg)

    def on_timer(self, name: str, token: int) -> None:
        pass

    def power_down(self) -> None:
        pass

    def seal(self, key: SymmetricKey | bytes, payload: wire.Payload) -> bytes:
        return self.suite.aead_encrypt(key, payload.pack(), type(payload).__name__.encode(), self.rng)

    def open(self, key: SymmetricKey | bytes, blob: bytes, payload_cls: type) -> wire.Payload:
        """AEAD-open and parse; raises ProtocolFailure(MAC_FAILURE / MALFORMED)."""
        try:
            plain = self.suite.aead_decrypt(key, blob, payload_cls.__name__.encode())
        except AuthenticationError as exc:
            raise ProtocolFailure(Reason.MAC_FAILURE, payload_cls.__name__) from exc
        try:
            return payload_cls.unpack(plain)
        except (wire.DecodeError, ValueError) as exc:
            raise ProtocolFailure(Reason.MALFORMED, str(exc)) from exc

    def seal_frame(self, key: SymmetricKey, msg: wire.Message) -> bytes:
        return self.suite.aead_encrypt(key, wire.encode_frame(msg), b"FRAME", self.rng)

    def open_frame(self, key: SymmetricKey, blob: bytes) -> wire.Message:
        try:
            plain = self.suite.aead_decrypt(key, blob, b"FRAME")
        except AuthenticationError as exc:
            raise ProtocolFailure(Reason.MAC_FAILURE, "secure frame") from exc
        try:
            return wire.decode_frame(plain)
        except wire.DecodeError as exc:
            raise ProtocolFailure(Reason.MALFORMED, str(exc)) from exc

    def guarded(self, fn: Callable[[], None], on_fail: Optional[Callable[[ProtocolFailure], None]] = None) -> None:
        try:
            fn()
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            if on_fail is not None:
                on_fail(exc)


def _nonce_bytes(*nonces: Nonce) -> bytes:
    return b"".join(n.to_bytes() for n in nonces)


def _dh_transcript(reader: EntityId, server: EntityId, n_r: Nonce, n_s: Nonce, pub_r: bytes, pub_s: bytes) -> bytes:
    return b"dh" + reader.raw + server.raw + _nonce_bytes(n_r, n_s) + pub_r + pub_s


# -- implant -----------------------------------------------------------------------


@dataclass
class ImplantSession:
    reader_id: EntityId
    card_id: EntityId
    n_r: Nonce
    n_i: Nonce
    n_c: Nonce
    key: SymmetricKey
    privilege: Privilege
    mode: Mode
    expires_ms: int


@dataclass
class _AuthAttempt:
    reader_id: EntityId
    n_r: Nonce
    n_i: Nonce
    offline: bool
    steps_done: list = field(default_factory=list)
    key: Optional[SymmetricKey] = None
    timer: int = 0


@dataclass(frozen=True)
class Executed:
    cmd: Command
    privilege: Privilege
    mode: Mode
    reader_id: EntityId
    card_id: EntityId
    n_r: Nonce
    n_i: Nonce
    time_ms: int


AUTH_STEPS = tuple(p.name for p in secure_steps() if p.auth)


class Implant(Entity):
    """Holds K_SI from manufacture; never verifies card signatures itself."""

    def __init__(
        self,
        eid: EntityId,
        rng: random.Random,
        suite: CryptoSuite,
        k_si: SymmetricKey,
        cost_table: CostTable,
        security: SecurityClass = SecurityClass.HW_AES,
        nr_offline: bool = True,
        flash_bytes: int = DEFAULT_FLASH_BYTES,
        zpd: bool = True,
        battery_j: float = 2.8 * 3600,
        session_ttl_ms: int = DEFAULT_TOKEN_LIFETIME_MS,
        oob_window_ms: int = 30_000,
        chunk_bytes: int = wire.DEFAULT_CHUNK_BYTES,
    ):
        super().__init__(eid, rng, suite)
        self.k_si = k_si
        self.cost_table = cost_table
        self.security = SecurityClass(security)
        self._nr_offline = bool(nr_offline)
        self.flash = SignatureFlash(flash_bytes)
        e_auth = auth_energy(cost_table, self.security)
        self.e_auth_uj = e_auth
        # Harvest refills one authentication's worth within a five-second window.
        self.ledger = EnergyLedger(
            battery_capacity_j=battery_j,
            zpd=zpd,
            harvest_capacity_uj=e_auth,
            harvest_rate_uj_per_s=e_auth / 5.0,
            harvested_uj=e_auth,
        )
        self.session_ttl_ms = session_ttl_ms
        self.oob_window_ms = oob_window_ms
        self.chunk_bytes = chunk_bytes
        self.session: Optional[ImplantSession] = None
        self.pending: Optional[_AuthAttempt] = None
        self.oob_armed_until = -1
        self.executed: list[Executed] = []
        self.therapy = 70
        self.suspended = False
        self.firmware = 1
        self._frozen = True

    def __setattr__(self, name, value):
        if name == "_nr_offline" and getattr(self, "_frozen", False):
            raise AttributeError("nr_offline is fixed at deployment")
        super().__setattr__(name, value)

    @property
    def nr_offline(self) -> bool:
        """Whether offline sessions still require a card signature per write command."""
        return self._nr_offline

    @property
    def oob_armed(self) -> bool:
        return self.now <= self.oob_armed_until

    def touch(self) -> None:
        """Physical contact opens the OOB port for a short window."""
        self.oob_armed_until = self.now + self.oob_window_ms

    # -- energy --

    def _charge(self, step: str, pre_auth: bool) -> None:
        self.ledger.spend(step, self.cost_table.step(self.security, step).energy_uj, pre_auth, self.now)

    def _charge_uj(self, step: str, uj: float) -> None:
        self.ledger.spend(step, uj, False, self.now)

    def _begin_attempt(self, reader_id: EntityId, n_r: Nonce, offline: bool) -> Optional[_AuthAttempt]:
        if self.pending is not None:
            self._abort(Reason.TIMEOUT, "superseded by a new attempt")
        self.ledger.refill(self.now)
        if not self.ledger.reserve(self.e_auth_uj, self.now):
            self.reject(Reason.ENERGY_DEFERRED, "harvested pool below E_auth")
            return None
        attempt = _AuthAttempt(reader_id, n_r, Nonce.fresh(self.rng), offline)
        attempt.timer = self.world.set_timer(self.id, PHASE_TIMEOUT_MS, "auth")
        self.pending = attempt
        return attempt

    def _step(self, attempt: _AuthAttempt, step: str) -> None:
        attempt.steps_done.append(step)
        self._charge(step, pre_auth=True)

    def _abort(self, reason: Reason, detail: str = "") -> None:
        attempt, self.pending = self.pending, None
        if attempt is not None:
            self.world.cancel_timer(attempt.timer)
            # The attempt's full E_auth budget was committed when it started.
            for step in AUTH_STEPS:
                if step not in attempt.steps_done:
                    self._charge(step, pre_auth=True)
        self.reject(reason, detail)

    def on_timer(self, name: str, token: int) -> None:
        if name == "auth" and self.pending is not None and self.pending.timer == token:
            self._abort(Reason.TIMEOUT, "authentication window lapsed")

    # -- online / bedside key establishment --

    def on_SkHello(self, channel: Channel, src: EntityId, msg: wire.SkHello) -> None:
        if channel is not Channel.RF:
            return
        attempt = self._begin_attempt(msg.reader_id, msg.n_r, offline=False)
        if attempt is None:
            return
        self._step(attempt, "rx_reader_hello")
        self._step(attempt, "tx_implant_hello")
        self.send(Channel.RF, msg.reader_id, wire.SkImplantHello(self.id, attempt.n_i))

    def on_SkKey(self, channel: Channel, src: EntityId, msg: wire.SkKey) -> None:
        attempt = self.pending
        if attempt is None or attempt.offline:
            self.reject(Reason.NO_SESSION, "key material without a pending hello")
            return
        self._step(attempt, "rx_key_material")
        try:
            mi: wire.MI = self.open(self.k_si, msg.m_i, wire.MI)
            if mi.n_r != attempt.n_r or mi.n_i != attempt.n_i or mi.reader_id != attempt.reader_id:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "m_I does not bind this attempt")
            if mi.privilege is None:
                raise ProtocolFailure(Reason.MALFORMED, "m_I without privilege")
            key = SymmetricKey(mi.key, KeyRole.SESSION_RI)
            mri: wire.MRI = self.open(key, msg.m_ri, wire.MRI)
            if mri.n_r != attempt.n_r or mri.n_i != attempt.n_i:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "m_RI nonces")
        except ProtocolFailure as exc:
            self._abort(exc.reason, exc.detail)
            return
        bedside = mi.card_id == EntityId.null()
        privilege = Privilege.READ_ONLY if bedside else mi.privilege
        self._establish(
            ImplantSession(
                mi.reader_id, mi.card_id, mi.n_r, mi.n_i, mi.n_c, key, privilege,
                Mode.BEDSIDE if bedside else Mode.ONLINE, self.now + self.session_ttl_ms,
            ),
            attempt,
        )
        self.send(Channel.RF, attempt.reader_id, wire.SkConfirm(self.suite.mac(key, b"I" + _nonce_bytes(mi.n_i, mi.n_r))))

    def _establish(self, session: ImplantSession, attempt: _AuthAttempt) -> None:
        self._step(attempt, "tx_key_confirm")
        self.world.cancel_timer(attempt.timer)
        self.pending = None
        self.session = session
        self.world.complete(
            "session", self.id, session.reader_id, (session.n_r, session.n_i, session.key.raw, session.mode.value)
        )

    # -- offline (touch-to-access) --

    def on_OobRequest(self, channel: Channel, src: EntityId, msg: wire.OobRequest) -> None:
        if channel is not Channel.OOB:
            self.reject(Reason.OOB_UNAVAILABLE, "pairing request outside the OOB port")
            return
        if not self.oob_armed:
            self.reject(Reason.OOB_UNAVAILABLE, "no physical contact")
            return
        attempt = self._begin_attempt(msg.reader_id, Nonce(0), offline=True)
        if attempt is None:
            return
        attempt.key = SymmetricKey.fresh(self.rng, KeyRole.SESSION_RI)
        self._step(attempt, "rx_reader_hello")
        self._step(attempt, "tx_implant_hello")
        self.send(Channel.OOB, msg.reader_id, wire.OobKey(attempt.key.raw, attempt.n_i, self.id))

    def on_OfflineConfirmR(self, channel: Channel, src: EntityId, msg: wire.OfflineConfirmR) -> None:
        attempt = self.pending
        if attempt is None or not attempt.offline or attempt.key is None:
            self.reject(Reason.NO_SESSION, "offline confirmation without pairing")
            return
        self._step(attempt, "rx_key_material")
        body = b"R" + _nonce_bytes(msg.n_r, attempt.n_i) + msg.card_id.raw + msg.n_c.to_bytes()
        if not self.suite.verify_mac(attempt.key, body, msg.mac):
            self._abort(Reason.MAC_FAILURE, "offline confirmation")
            return
        session = ImplantSession(
            attempt.reader_id, msg.card_id, msg.n_r, attempt.n_i, msg.n_c, attempt.key,
            OFFLINE_PRIVILEGE_CAP, Mode.OFFLINE, self.now + self.session_ttl_ms,
        )
        self._establish(session, attempt)
        self.oob_armed_until = -1
        self.send(Channel.RF, attempt.reader_id, wire.OfflineConfirmI(self.suite.mac(session.key, b"I" + _nonce_bytes(session.n_i, session.n_r))))

    # -- main phase --

    def on_CommandSigned(self, channel: Channel, src: EntityId, msg: wire.CommandSigned) -> None:
        self._command(msg.block, wire.SignedCmdBlock)

    def on_CommandServerMac(self, channel: Channel, src: EntityId, msg: wire.CommandServerMac) -> None:
        self._command(msg.block, wire.CmdBlock, server_mac=msg.server_mac)

    def on_CommandUnsigned(self, channel: Channel, src: EntityId, msg: wire.CommandUnsigned) -> None:
        self._command(msg.block, wire.CmdBlock)

    def _live_session(self) -> ImplantSession:
        s = self.session
        if s is None:
            raise ProtocolFailure(Reason.NO_SESSION)
        if self.now > s.expires_ms:
            self.session = None
            raise ProtocolFailure(Reason.SESSION_EXPIRED)
        return s

    def _command(self, block: bytes, payload: type, server_mac: Optional[bytes] = None) -> None:
        try:
            s = self._live_session()
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        self._charge("rx_command", pre_auth=False)
        try:
            cb = self.open(s.key, block, payload)
            sig = getattr(cb, "sig", None)
            if cb.n_r != s.n_r or cb.n_i != s.n_i:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "command nonces")
            self._gate(s, cb, sig, server_mac)
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        cmd = cb.cmd
        if cmd.required_privilege > s.privilege:
            self.reject(Reason.PRIVILEGE_VIOLATION, f"{cmd.kind.name} needs {cmd.required_privilege.name}")
            self._answer(s, bytes([STATUS_PRIVILEGE_VIOLATION]) + bytes(ANS_BYTES - 1))
            return
        if cmd.is_write and sig is not None and self._keeps_records(s):
            self._charge("store_signature", pre_auth=False)
            self.flash.store(SignatureRecord(sig, cmd, s.card_id, s.n_c, s.n_r))
        self.executed.append(Executed(cmd, s.privilege, s.mode, s.reader_id, s.card_id, s.n_r, s.n_i, self.now))
        if cmd.kind is CommandKind.READ_STATUS and cmd.payload > 0:
            self._answer_bulk(s, cmd.payload)
        else:
            self._answer(s, self._execute(cmd))
        if cmd.kind is CommandKind.FINISH:
            self.session = None

    def _keeps_records(self, s: ImplantSession) -> bool:
        return s.mode is Mode.ONLINE or (s.mode is Mode.OFFLINE and self.nr_offline)

    def _gate(self, s: ImplantSession, cb: wire.CmdBlock, sig: Optional[bytes], server_mac: Optional[bytes]) -> None:
        if s.mode is Mode.BEDSIDE:
            expected = cb.cmd.to_bytes() + _nonce_bytes(cb.n_r, cb.n_i)
            if server_mac is None or not self.suite.verify_mac(self.k_si, expected, server_mac):
                raise ProtocolFailure(Reason.MAC_FAILURE, "server MAC missing or wrong")
        elif sig is None and (s.mode is Mode.ONLINE or self.nr_offline):
            raise ProtocolFailure(Reason.NR_REQUIRED, "unsigned command")
        elif server_mac is not None:
            raise ProtocolFailure(Reason.MAC_FAILURE, "server MAC outside a bedside session")

    def _execute(self, cmd: Command) -> bytes:
        k = cmd.kind
        if k is CommandKind.WRITE_THERAPY:
            self.therapy = cmd.payload
        elif k is CommandKind.SUSPEND:
            self.suspended = True
        elif k is CommandKind.RESUME:
            self.suspended = False
        elif k is CommandKind.FIRMWARE_UPDATE:
            self.firmware = cmd.payload
        state = self.therapy.to_bytes(3, "big") + bytes([int(self.suspended)]) + self.firmware.to_bytes(3, "big")
        return bytes([STATUS_OK]) + state

    def _answer(self, s: ImplantSession, ans: bytes) -> None:
        self._charge("tx_answer", pre_auth=False)
        self.send(Channel.RF, s.reader_id, wire.Answer(self.seal(s.key, wire.AnsBlock(ans, s.n_i, s.n_r))))
        s.n_i = s.n_i.incremented()

    def _answer_bulk(self, s: ImplantSession, nbytes: int) -> None:
        log = self.rng.randbytes(nbytes)
        sizes = bulk_chunks(nbytes, self.chunk_bytes)
        off = 0
        for index, size in enumerate(sizes):
            cost = self.cost_table.chunk_cost(self.security, size)
            self._charge_uj("bulk_chunk", cost.energy_uj)
            block = wire.ChunkBlock(s.n_i, s.n_r, index, len(sizes), log[off : off + size])
            self.send(Channel.RF, s.reader_id, wire.AnswerChunk(self.seal(s.key, block)))
            off += size
        s.n_i = s.n_i.incremented()


# -- smart card --------------------------------------------------------------------


@dataclass(frozen=True)
class CardFlash:
    reader_id: EntityId
    n_r: Nonce
    n_c: Nonce
    n_s: Nonce
    key: bytes


@dataclass
class _CardPending:
    reader_id: EntityId
    n_r: Nonce
    n_s: Nonce
    n_c: Nonce


class SmartCard(Entity):
    def __init__(
        self,
        eid: EntityId,
        rng: random.Random,
        suite: CryptoSuite,
        k_sc: SymmetricKey,
        keypair: KeyPair,
        certificate: Certificate,
        pin: str,
        retry_limit: int = PIN_RETRY_LIMIT,
    ):
        super().__init__(eid, rng, suite)
        self.k_sc = k_sc
        self.keypair = keypair
        self.certificate = certificate
        self._pin_salt = rng.randbytes(8)
        self.pin_hash = suite.hash(self._pin_salt + encode_pin(pin))
        self.retry_limit = retry_limit
        self.pin_retry_count = 0
        self.locked = False
        self.flash: Optional[CardFlash] = None  # survives power-down
        self._pending: Optional[_CardPending] = None  # volatile

    def power_down(self) -> None:
        self._pending = None

    def _reply(self, dst: EntityId, msg: wire.Message) -> None:
        self.send(Channel.CARD, dst, msg)

    def _error(self, dst: EntityId, reason: Reason, detail: str = "") -> None:
        self.reject(reason, detail)
        self._reply(dst, wire.CardError(reason))

    def on_RcHello(self, channel: Channel, src: EntityId, msg: wire.RcHello) -> None:
        n_c = Nonce.fresh(self.rng)
        self._pending = _CardPending(msg.reader_id, msg.n_r, msg.n_s, n_c)
        m_sc1 = self.seal(self.k_sc, wire.MSC1(self.certificate, msg.reader_id, msg.n_r, msg.n_s, n_c))
        self._reply(src, wire.CardHello(self.id, n_c, m_sc1))

    def on_RcConfirm(self, channel: Channel, src: EntityId, msg: wire.RcConfirm) -> None:
        p = self._pending
        if p is None:
            self._error(src, Reason.NO_SESSION, "confirmation without hello")
            return
        try:
            tok: wire.TokenC = self.open(self.k_sc, msg.token_c, wire.TokenC)
            if (tok.n_r, tok.n_c, tok.reader_id, tok.card_id) != (p.n_r, p.n_c, p.reader_id, self.id):
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "token_C binding")
            if not self.suite.verify_mac(tok.key, _nonce_bytes(p.n_r, p.n_c), msg.mac):
                raise ProtocolFailure(Reason.MAC_FAILURE, "reader confirmation")
        except ProtocolFailure as exc:
            self._pending = None
            self._error(src, exc.reason, exc.detail)
            return
        self._pending = None
        self.flash = CardFlash(p.reader_id, p.n_r, p.n_c, p.n_s, tok.key)
        self.world.complete("card", self.id, p.reader_id, (p.n_r, p.n_c, tok.key))
        reply = self.suite.mac(tok.key, _nonce_bytes(p.n_r.incremented(), p.n_c.incremented()))
        self._reply(src, wire.CardConfirm(reply))

    def on_PinVerify(self, channel: Channel, src: EntityId, msg: wire.PinVerify) -> None:
        if self.locked:
            self._error(src, Reason.CARD_LOCKED)
            return
        f = self.flash
        if f is None:
            self._error(src, Reason.NO_SESSION, "no reader session in flash")
            return
        try:
            blk: wire.PinBlock = self.open(f.key, msg.block, wire.PinBlock)
            if blk.n_r != f.n_r or blk.n_c != f.n_c:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "PIN block nonces")
        except ProtocolFailure as exc:
            self._error(src, exc.reason, exc.detail)
            return
        if self.suite.hash(self._pin_salt + blk.pin) != self.pin_hash:
            self.pin_retry_count += 1
            if self.pin_retry_count >= self.retry_limit:
                self.locked = True
                self._error(src, Reason.CARD_LOCKED, "retry limit reached")
            else:
                self._error(src, Reason.PIN_MISMATCH)
            return
        self.pin_retry_count = 0
        self._reply(src, wire.PinResult(self.seal(self.k_sc, wire.MSC2(1, f.n_c, f.n_s))))

    def on_SignRequest(self, channel: Channel, src: EntityId, msg: wire.SignRequest) -> None:
        if self.locked:
            self._error(src, Reason.CARD_LOCKED)
            return
        f = self.flash
        if f is None:
            self._error(src, Reason.NO_SESSION)
            return
        try:
            blk: wire.SignBlock = self.open(f.key, msg.block, wire.SignBlock)
            if blk.n_c != f.n_c:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "sign request card nonce")
        except ProtocolFailure as exc:
            self._error(src, exc.reason, exc.detail)
            return
        sig = self.suite.sign(self.keypair, signed_message(blk.cmd, blk.n_r, blk.n_c))
        self._reply(src, wire.SignResponse(self.seal(f.key, wire.SigBlock(blk.cmd, blk.n_r, blk.n_c, sig))))


# -- reader ------------------------------------------------------------------------


@dataclass
class ReaderSession:
    implant_id: EntityId
    n_r: Nonce
    mode: Mode
    n_i: Optional[Nonce] = None
    key: Optional[SymmetricKey] = None
    established: bool = False


@dataclass(frozen=True)
class AnswerRecord:
    cmd: Command
    status: int
    data: bytes


Tamper = Callable[[Command, bytes], tuple[Command, bytes]]


class Reader(Entity):
    def __init__(
        self,
        eid: EntityId,
        rng: random.Random,
        suite: CryptoSuite,
        ca_public: bytes,
        keypair: KeyPair,
        certificate: Certificate,
        server_id: EntityId,
        kind: ReaderKind = ReaderKind.VALID,
        bedside: bool = False,
        zone: str = "hospital",
    ):
        super().__init__(eid, rng, suite)
        self.ca_public = ca_public
        self.keypair = keypair
        self.certificate = certificate
        self.server_id = server_id
        self.kind = ReaderKind(kind)
        self.bedside = bedside
        self.zone = zone
        self.tamper: Optional[Tamper] = None  # installed by whoever controls a hacked reader
        self.reset_server_link()
        self.token_lifetime_ms = 0
        self.token_issued_ms: Optional[int] = None
        self.k_rc: Optional[SymmetricKey] = None
        self.card_id = EntityId.null()
        self.card_n_r = Nonce(0)
        self.card_n_c = Nonce(0)
        self.privilege: Optional[Privilege] = None
        self.m_sc2: Optional[bytes] = None
        self.session: Optional[ReaderSession] = None
        self.answers: list[AnswerRecord] = []
        self.done: set[str] = set()
        self.failed: dict[str, Reason] = {}
        self._timers: dict[str, int] = {}
        self._pending_cmd: Optional[Command] = None
        self._awaiting_sig = False
        self._chunks: dict[int, bytes] = {}
        self._bedside_queue: list[wire.BedsideCommand] = []
        self._bedside_current: Optional[wire.BedsideCommand] = None
        self._hello_retries = 0
        self.hello_retry_limit = 0

    def reset_server_link(self) -> None:
        self.k_rs: Optional[SymmetricKey] = None
        self.link_n_r = Nonce(0)
        self.link_n_s = Nonce(0)
        self._dh: Optional[KeyPair] = None
        self._dh_transcript = b""
        self._pending_rs: Optional[SymmetricKey] = None
        self._hello_token: Optional[int] = None

    # -- clocks and timers --

    def clock(self) -> int:
        """Milliseconds since token issue; infinite if no token."""
        if self.token_issued_ms is None:
            return 1 << 62
        return self.now - self.token_issued_ms

    def token_valid(self) -> bool:
        return self.clock() < self.token_lifetime_ms

    def _require_token(self) -> None:
        if not self.token_valid():
            raise ProtocolFailure(Reason.TOKEN_EXPIRED, f"clock {self.clock()} >= T_L {self.token_lifetime_ms}")

    def _arm(self, phase: str) -> None:
        self.done.discard(phase)
        self.failed.pop(phase, None)
        self._disarm(phase)
        self._timers[phase] = self.world.set_timer(self.id, PHASE_TIMEOUT_MS, phase)

    def _disarm(self, phase: str) -> None:
        token = self._timers.pop(phase, None)
        if token is not None:
            self.world.cancel_timer(token)

    def _finish(self, phase: str) -> None:
        self._disarm(phase)
        self.done.add(phase)

    def _fail(self, phase: str, reason: Reason, detail: str = "") -> None:
        self._disarm(phase)
        self.failed[phase] = reason
        self.reject(reason, detail)

    def _fail_quiet(self, phase: str, reason: Reason) -> None:
        self._disarm(phase)
        self.failed[phase] = reason

    def busy(self, phase: str) -> bool:
        return phase in self._timers

    def on_timer(self, name: str, token: int) -> None:
        if name == "hello":
            self._retry_hello(token)
            return
        if self._timers.get(name) == token:
            del self._timers[name]
            self.failed[name] = Reason.TIMEOUT
            self.reject(Reason.TIMEOUT, f"{name} phase")

    def _card(self) -> EntityId:
        card = self.world.card_slots.get(self.id)
        if card is None:
            raise ProtocolFailure(Reason.NOT_CONNECTED, "no card inserted")
        return card

    def _secure_send(self, msg: wire.Message) -> None:
        if self.k_rs is None:
            raise ProtocolFailure(Reason.NOT_CONNECTED, "no server session key")
        self.send(Channel.INTERNET, self.server_id, wire.Secure(self.id, self.seal_frame(self.k_rs, msg)))

    # -- phase I: CPP + DH --

    def connect(self) -> None:
        self.reset_server_link()
        self._arm("dh")
        self.send(Channel.INTERNET, self.server_id, wire.ServerHello(self.id))

    def on_PuzzleChallenge(self, channel: Channel, src: EntityId, msg: wire.PuzzleChallenge) -> None:
        if "dh" not in self._timers:
            return
        solution = b""
        if msg.k > 0:
            try:
                solution = solve_puzzle(self.suite, Puzzle(msg.hx, msg.partial_x, msg.t, msg.k)).bits
            except ValueError:
                self._fail("dh", Reason.PUZZLE_WRONG, "unsolvable puzzle")
                return
        self._dh = KeyPair.generate(self.rng)
        self.link_n_r = Nonce.fresh(self.rng)
        self.send(
            Channel.INTERNET,
            self.server_id,
            wire.DhInit(self.id, self.link_n_r, self.certificate, self._dh.public, msg.t, msg.k, solution),
        )

    def on_DhResp(self, channel: Channel, src: EntityId, msg: wire.DhResp) -> None:
        if self._dh is None or "dh" not in self._timers:
            return
        try:
            reason = check_certificate(msg.cert, self.ca_public, self.suite, self.world.wall_clock_ms(), subject=msg.server_id)
            if reason is not None or msg.server_id != self.server_id:
                raise ProtocolFailure(Reason.CERT_INVALID, "server certificate")
            transcript = _dh_transcript(self.id, msg.server_id, self.link_n_r, msg.n_s, self._dh.public, msg.dh_pub)
            if not self.suite.verify_sig(msg.cert.public_key, b"S" + transcript, msg.sig):
                raise ProtocolFailure(Reason.CERT_INVALID, "server handshake signature")
            try:
                key = self.suite.dh_exchange(self._dh, msg.dh_pub, transcript, KeyRole.SESSION_RS)
            except HandshakeError as exc:
                raise ProtocolFailure(Reason.GROUP_ELEMENT_INVALID, str(exc)) from exc
        except ProtocolFailure as exc:
            self._fail("dh", exc.reason, exc.detail)
            return
        self.link_n_s = msg.n_s
        self._dh_transcript = transcript
        self._pending_rs = key
        self.world.running("dh", self.id, self.server_id, (self.link_n_r, msg.n_s, key.raw))
        self.send(Channel.INTERNET, self.server_id, wire.DhFinish(self.id, self.suite.sign(self.keypair, b"R" + transcript)))

    def on_DhAck(self, channel: Channel, src: EntityId, msg: wire.DhAck) -> None:
        key = self._pending_rs
        if key is None or "dh" not in self._timers:
            return
        if not self.suite.verify_mac(key, b"ack" + _nonce_bytes(self.link_n_r, self.link_n_s), msg.mac):
            self._fail("dh", Reason.MAC_FAILURE, "handshake acknowledgement")
            return
        self.k_rs = key
        self._pending_rs = None
        self.world.complete("dh", self.id, self.server_id, (self.link_n_r, self.link_n_s, key.raw))
        self._finish("dh")

    def on_Reject(self, channel: Channel, src: EntityId, msg: wire.Reject) -> None:
        for phase in ("dh",):
            if phase in self._timers:
                self._fail(phase, msg.reason, "server reject")
                return

    # -- phase I: five-pass reader-card authentication --

    def authenticate_card(self) -> None:
        self._arm("card")
        try:
            card = self._card()
            if self.k_rs is None:
                raise ProtocolFailure(Reason.NOT_CONNECTED, "no server session key")
        except ProtocolFailure as exc:
            self._fail("card", exc.reason, exc.detail)
            return
        self.k_rc = None
        self.token_issued_ms = None
        self.card_n_r = Nonce.fresh(self.rng)
        self.send(Channel.CARD, card, wire.RcHello(self.id, self.card_n_r, self.link_n_s))

    def on_CardHello(self, channel: Channel, src: EntityId, msg: wire.CardHello) -> None:
        if "card" not in self._timers:
            return
        self.card_id = msg.card_id
        self.card_n_c = msg.n_c
        self.guarded(
            lambda: self._secure_send(wire.TokenRequest(self.id, self.card_n_r, msg.card_id, msg.n_c, msg.m_sc1)),
            lambda exc: self._fail_quiet("card", exc.reason),
        )

    def _on_token(self, msg: wire.TokenResponse) -> None:
        if "card" not in self._timers:
            return
        try:
            tok: wire.TokenR = self.open(self.k_rs, msg.token_r, wire.TokenR)
            if (tok.n_r, tok.n_c, tok.reader_id, tok.card_id) != (self.card_n_r, self.card_n_c, self.id, self.card_id):
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "token_R binding")
            card = self._card()
        except ProtocolFailure as exc:
            self._fail("card", exc.reason, exc.detail)
            return
        self.k_rc = SymmetricKey(tok.key, KeyRole.SESSION_RC)
        self.token_lifetime_ms = tok.lifetime_ms
        self.privilege = tok.privilege
        self.token_issued_ms = self.now  # arm the T_L countdown
        mac = self.suite.mac(self.k_rc, _nonce_bytes(self.card_n_r, self.card_n_c))
        self.world.running("card", self.id, self.card_id, (self.card_n_r, self.card_n_c, self.k_rc.raw))
        self.send(Channel.CARD, card, wire.RcConfirm(mac, msg.token_c))

    def on_CardConfirm(self, channel: Channel, src: EntityId, msg: wire.CardConfirm) -> None:
        if "card" not in self._timers or self.k_rc is None:
            return
        expected = _nonce_bytes(self.card_n_r.incremented(), self.card_n_c.incremented())
        if not self.suite.verify_mac(self.k_rc, expected, msg.mac):
            self.k_rc = None
            self.token_issued_ms = None
            self._fail("card", Reason.MAC_FAILURE, "card confirmation")
            return
        self.world.complete("card", self.id, self.card_id, (self.card_n_r, self.card_n_c, self.k_rc.raw))
        self._finish("card")

    def on_CardError(self, channel: Channel, src: EntityId, msg: wire.CardError) -> None:
        for phase in ("card", "user", "command"):
            if phase in self._timers:
                self._fail(phase, msg.reason, "card error")
                if phase == "command":
                    self._pending_cmd = None
                return

    # -- phase II: user authentication --

    def verify_pin(self, pin: str) -> None:
        self._arm("user")
        self.m_sc2 = None
        try:
            self._require_token()
            card = self._card()
            if self.k_rc is None:
                raise ProtocolFailure(Reason.NO_SESSION, "no card session key")
            block = self.seal(self.k_rc, wire.PinBlock(encode_pin(pin), self.card_n_r, self.card_n_c))
        except ProtocolFailure as exc:
            self._fail("user", exc.reason, exc.detail)
            return
        self.send(Channel.CARD, card, wire.PinVerify(block))

    def on_PinResult(self, channel: Channel, src: EntityId, msg: wire.PinResult) -> None:
        if "user" not in self._timers:
            return
        self.m_sc2 = msg.m_sc2
        self._finish("user")

    # -- phase III: session-key establishment --

    def establish_session(self, implant_id: EntityId, retries: int = 0) -> None:
        self._arm("session")
        mode = Mode.BEDSIDE if self.bedside else Mode.ONLINE
        try:
            if self.k_rs is None:
                raise ProtocolFailure(Reason.NOT_CONNECTED, "no server session key")
            if mode is Mode.ONLINE:
                self._require_token()
                if self.m_sc2 is None:
                    raise ProtocolFailure(Reason.M_SC2_INVALID, "user not authenticated")
        except ProtocolFailure as exc:
            self._fail("session", exc.reason, exc.detail)
            return
        self.session = ReaderSession(implant_id, Nonce.fresh(self.rng), mode)
        self.hello_retry_limit = retries
        self._hello_retries = 0
        self._send_hello()

    def _send_hello(self) -> None:
        s = self.session
        self.send(Channel.RF, s.implant_id, wire.SkHello(self.id, s.n_r))
        if self._hello_retries < self.hello_retry_limit:
            self._hello_token = self.world.set_timer(self.id, HELLO_RETRY_MS, "hello")

    def _retry_hello(self, token: int) -> None:
        s = self.session
        if token != self._hello_token or s is None or s.n_i is not None:
            return
        self._hello_retries += 1
        # Re-arm the phase timeout so retries are not cut short.
        self._disarm("session")
        self._timers["session"] = self.world.set_timer(self.id, PHASE_TIMEOUT_MS, "session")
        self._send_hello()

    def on_SkImplantHello(self, channel: Channel, src: EntityId, msg: wire.SkImplantHello) -> None:
        s = self.session
        if s is None or "session" not in self._timers or msg.implant_id != s.implant_id or s.n_i is not None:
            return
        s.n_i = msg.n_i
        if self._hello_token is not None:
            self.world.cancel_timer(self._hello_token)
            self._hello_token = None
        if s.mode is Mode.BEDSIDE:
            req = wire.BedsideKeyRequest(self.id, s.n_r, s.implant_id, s.n_i)
        else:
            req = wire.KeyRequest(self.id, s.n_r, s.implant_id, s.n_i, self.card_id, self.card_n_c, self.link_n_s, self.m_sc2)
        self.guarded(lambda: self._secure_send(req), lambda exc: self._fail_quiet("session", exc.reason))

    def _on_key_response(self, msg: wire.KeyResponse) -> None:
        s = self.session
        if s is None or "session" not in self._timers or s.n_i is None:
            return
        try:
            mr: wire.MR = self.open(self.k_rs, msg.m_r, wire.MR)
            if (mr.n_r, mr.n_i, mr.implant_id) != (s.n_r, s.n_i, s.implant_id):
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "m_R binding")
        except ProtocolFailure as exc:
            self._fail("session", exc.reason, exc.detail)
            return
        s.key = SymmetricKey(mr.key, KeyRole.SESSION_RI)
        m_ri = self.seal(s.key, wire.MRI(s.n_r, s.n_i))
        self.world.running("session", self.id, s.implant_id, (s.n_r, s.n_i, s.key.raw, s.mode.value))
        self.send(Channel.RF, s.implant_id, wire.SkKey(msg.m_i, m_ri))

    def on_SkConfirm(self, channel: Channel, src: EntityId, msg: wire.SkConfirm) -> None:
        s = self.session
        if s is None or s.key is None or s.established or "session" not in self._timers:
            return
        if not self.suite.verify_mac(s.key, b"I" + _nonce_bytes(s.n_i, s.n_r), msg.mac):
            self._fail("session", Reason.MAC_FAILURE, "implant confirmation")
            return
        self._established()

    def _established(self) -> None:
        s = self.session
        s.established = True
        self.world.complete("session", self.id, s.implant_id, (s.n_r, s.n_i, s.key.raw, s.mode.value))
        self._finish("session")
        if s.mode is Mode.BEDSIDE:
            self._bedside_next()

    # -- offline pairing --

    def pair_offline(self, implant_id: EntityId, require_card: bool = True) -> None:
        self._arm("session")
        if require_card:
            try:
                self._require_token()
                if self.m_sc2 is None:
                    raise ProtocolFailure(Reason.PIN_MISMATCH, "user not authenticated")
            except ProtocolFailure as exc:
                self._fail("session", exc.reason, exc.detail)
                return
        self.session = ReaderSession(implant_id, Nonce.fresh(self.rng), Mode.OFFLINE)
        self._offline_card = require_card
        self.send(Channel.OOB, implant_id, wire.OobRequest(self.id))

    def on_OobKey(self, channel: Channel, src: EntityId, msg: wire.OobKey) -> None:
        s = self.session
        if channel is not Channel.OOB or s is None or s.mode is not Mode.OFFLINE or s.key is not None:
            return
        s.key = SymmetricKey(msg.key, KeyRole.SESSION_RI)
        s.n_i = msg.n_i
        card_id = self.card_id if self._offline_card else EntityId.null()
        n_c = self.card_n_c if self._offline_card else Nonce(0)
        body = b"R" + _nonce_bytes(s.n_r, s.n_i) + card_id.raw + n_c.to_bytes()
        self.world.running("session", self.id, s.implant_id, (s.n_r, s.n_i, s.key.raw, s.mode.value))
        self.send(Channel.RF, s.implant_id, wire.OfflineConfirmR(s.n_r, card_id, n_c, self.suite.mac(s.key, body)))

    def on_OfflineConfirmI(self, channel: Channel, src: EntityId, msg: wire.OfflineConfirmI) -> None:
        s = self.session
        if s is None or s.mode is not Mode.OFFLINE or s.key is None or s.established:
            return
        if not self.suite.verify_mac(s.key, b"I" + _nonce_bytes(s.n_i, s.n_r), msg.mac):
            self._fail("session", Reason.MAC_FAILURE, "implant offline confirmation")
            return
        self._established()

    # -- phase IV: main phase --

    def send_command(self, cmd: Command, signed: bool = True) -> None:
        self._arm("command")
        s = self.session
        try:
            if s is None or not s.established:
                raise ProtocolFailure(Reason.NO_SESSION)
            if s.mode is Mode.BEDSIDE:
                raise ProtocolFailure(Reason.PRIVILEGE_VIOLATION, "bedside commands come from the server")
            if self.kind is ReaderKind.FORGED and signed:
                # No card behind it: fabricate a signature-shaped blob.
                self._pending_cmd = cmd
                self._to_implant(cmd, self.rng.randbytes(SIG_BYTES))
                return
            if not signed:
                self._pending_cmd = cmd
                self._to_implant(cmd, None)
                return
            self._require_token()
            card = self._card()
            block = self.seal(self.k_rc, wire.SignBlock(cmd, s.n_r, self.card_n_c))
        except ProtocolFailure as exc:
            self._fail("command", exc.reason, exc.detail)
            return
        self._pending_cmd = cmd
        self._awaiting_sig = True
        self.send(Channel.CARD, card, wire.SignRequest(block))

    def on_SignResponse(self, channel: Channel, src: EntityId, msg: wire.SignResponse) -> None:
        if self._pending_cmd is None or not self._awaiting_sig or "command" not in self._timers:
            return
        try:
            blk: wire.SigBlock = self.open(self.k_rc, msg.block, wire.SigBlock)
            if (blk.cmd, blk.n_r, blk.n_c) != (self._pending_cmd, self.session.n_r, self.card_n_c):
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "signature for another command")
        except ProtocolFailure as exc:
            self._fail("command", exc.reason, exc.detail)
            return
        self._awaiting_sig = False
        self._to_implant(self._pending_cmd, blk.sig)

    def _to_implant(self, cmd: Command, sig: Optional[bytes]) -> None:
        s = self.session
        if sig is not None and self.tamper is not None:
            cmd, sig = self.tamper(cmd, sig)
        self._pending_cmd = cmd
        self._chunks = {}
        if sig is None:
            msg = wire.CommandUnsigned(self.seal(s.key, wire.CmdBlock(cmd, s.n_r, s.n_i)))
        else:
            msg = wire.CommandSigned(self.seal(s.key, wire.SignedCmdBlock(cmd, s.n_r, s.n_i, sig)))
        self.send(Channel.RF, s.implant_id, msg)

    def on_Answer(self, channel: Channel, src: EntityId, msg: wire.Answer) -> None:
        s = self.session
        if s is None or s.key is None or self._pending_cmd is None:
            return
        try:
            ans: wire.AnsBlock = self.open(s.key, msg.block, wire.AnsBlock)
            if ans.n_i != s.n_i or ans.n_r != s.n_r:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "answer nonces")
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        self._answered(ans.ans[0], ans.ans)

    def on_AnswerChunk(self, channel: Channel, src: EntityId, msg: wire.AnswerChunk) -> None:
        s = self.session
        if s is None or s.key is None or self._pending_cmd is None:
            return
        try:
            ch: wire.ChunkBlock = self.open(s.key, msg.block, wire.ChunkBlock)
            if ch.n_i != s.n_i or ch.n_r != s.n_r or ch.index >= ch.count:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "chunk nonces")
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        self._chunks[ch.index] = ch.data
        if s.mode is Mode.BEDSIDE and self._bedside_current is not None:
            relay = wire.BedsideLogChunk(self._bedside_current.index, ch.index, ch.count, ch.data)
            self.guarded(lambda: self._secure_send(relay))
        if len(self._chunks) == ch.count:
            data = b"".join(self._chunks[i] for i in range(ch.count))
            self._chunks = {}
            self._answered(STATUS_OK, data, relayed=True)

    def _answered(self, status: int, data: bytes, relayed: bool = False) -> None:
        s = self.session
        cmd, self._pending_cmd = self._pending_cmd, None
        s.n_i = s.n_i.incremented()
        self.answers.append(AnswerRecord(cmd, status, data))
        if status == STATUS_PRIVILEGE_VIOLATION:
            self._fail("command", Reason.PRIVILEGE_VIOLATION, cmd.kind.name)
        else:
            self._finish("command")
        if cmd.kind is CommandKind.FINISH:
            s.established = False
        if s.mode is Mode.BEDSIDE and self._bedside_current is not None:
            current, self._bedside_current = self._bedside_current, None
            if not relayed:
                self.guarded(lambda: self._secure_send(wire.BedsideAnswer(current.index, cmd, status, data)))
            self._bedside_next()

    # -- bedside relay --

    def _bedside_next(self) -> None:
        s = self.session
        if not self._bedside_queue or s is None or not s.established or self._bedside_current is not None:
            return
        bc = self._bedside_queue.pop(0)
        self._bedside_current = bc
        self._pending_cmd = bc.cmd
        self._chunks = {}
        block = self.seal(s.key, wire.CmdBlock(bc.cmd, s.n_r, s.n_i))
        self.send(Channel.RF, s.implant_id, wire.CommandServerMac(block, bc.server_mac))

    # -- server replies --

    def on_Secure(self, channel: Channel, src: EntityId, msg: wire.Secure) -> None:
        if self.k_rs is None:
            return
        try:
            inner = self.open_frame(self.k_rs, msg.inner)
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        if isinstance(inner, wire.TokenResponse):
            self._on_token(inner)
        elif isinstance(inner, wire.KeyResponse):
            self._on_key_response(inner)
        elif isinstance(inner, wire.SecureReject):
            for phase in ("card", "session"):
                if phase in self._timers:
                    self._fail(phase, inner.reason, "server reject")
                    return
            self.reject(inner.reason, "server reject")
        elif isinstance(inner, wire.BedsideCommand):
            self._bedside_queue.append(inner)
            self._bedside_next()
        else:
            self.reject(Reason.MALFORMED, f"unexpected {type(inner).__name__}")


# -- hospital server ---------------------------------------------------------------


@dataclass
class _Link:
    n_r: Nonce
    n_s: Nonce
    key: SymmetricKey
    transcript: bytes = b""
    reader_cert: Optional[Certificate] = None


@dataclass(frozen=True)
class _CardToken:
    reader_id: EntityId
    n_r: Nonce
    n_c: Nonce
    n_s: Nonce
    privilege: Privilege


@dataclass
class _BedsideRun:
    reader_id: EntityId
    implant_id: EntityId
    n_r: Nonce
    n_i: Nonce
    commands: list
    index: int = 0
    waiting: bool = False
    parts: dict = field(default_factory=dict)


@dataclass
class NetworkPolicy:
    trusted_zones: frozenset = frozenset({"hospital"})
    default_hours: tuple = (8, 18)
    working_hours: dict = field(default_factory=dict)  # card id -> (start hour, end hour)

    def permits_write(self, zone: str, card_id: EntityId, wall_ms: int) -> bool:
        start, end = self.working_hours.get(card_id, self.default_hours)
        hour = (wall_ms // HOUR_MS) % 24
        return zone in self.trusted_zones and start <= hour < end


class HospitalServer(Entity):
    def __init__(
        self,
        eid: EntityId,
        rng: random.Random,
        suite: CryptoSuite,
        ca_public: bytes,
        keypair: KeyPair,
        certificate: Certificate,
        token_lifetime_ms: int = DEFAULT_TOKEN_LIFETIME_MS,
        puzzle_k: int = 10,
        load_threshold: int = DEFAULT_LOAD_THRESHOLD,
        puzzle_expiry_ms: int = DEFAULT_EXPIRY_MS,
        policy: Optional[NetworkPolicy] = None,
    ):
        super().__init__(eid, rng, suite)
        self.ca_public = ca_public
        self.keypair = keypair
        self.certificate = certificate
        self.k_s = SymmetricKey.fresh(rng, KeyRole.SERVER_SECRET)
        self.token_lifetime_ms = token_lifetime_ms
        self.puzzle_k = puzzle_k
        self.load_threshold = load_threshold
        self.puzzle_expiry_ms = puzzle_expiry_ms
        self.background_load = 0
        self.policy = policy or NetworkPolicy()
        self.implants: dict[EntityId, SymmetricKey] = {}
        self.cards: dict[EntityId, SymmetricKey] = {}
        self.crl: set[EntityId] = set()
        self.bedside_readers: set[EntityId] = set()
        self.links: dict[EntityId, _Link] = {}  # confirmed only
        self._handshakes: dict[EntityId, _Link] = {}
        self.seen_bedside_requests: set = set()
        self.server_links: dict[EntityId, SymmetricKey] = {}
        self.manufacturer_id: Optional[EntityId] = None
        self.card_tokens: dict[EntityId, _CardToken] = {}
        self.seen_token_requests: set = set()
        self.used_m_sc2: set[bytes] = set()
        self.bedside_plan: dict[EntityId, list[Command]] = {}
        self.bedside_logs: dict[EntityId, list] = {}
        self._bedside_runs: dict[EntityId, _BedsideRun] = {}
        self._remote_pending: dict[int, tuple[EntityId, bytes]] = {}
        self._request_ids = 0
        self.grants: list[tuple[EntityId, EntityId, Privilege]] = []

    @property
    def load_level(self) -> int:
        return self.background_load + len(self._handshakes)

    def required_difficulty(self) -> int:
        return self.puzzle_k if self.load_level > self.load_threshold else 0

    def _reject_plain(self, dst: EntityId, reason: Reason, detail: str = "") -> None:
        self.reject(reason, detail)
        self.send(Channel.INTERNET, dst, wire.Reject(reason))

    def _secure_reply(self, reader_id: EntityId, msg: wire.Message) -> None:
        link = self.links.get(reader_id)
        if link is None:
            return
        self.send(Channel.INTERNET, reader_id, wire.Secure(self.id, self.seal_frame(link.key, msg)))

    def _secure_reject(self, reader_id: EntityId, reason: Reason, detail: str = "") -> None:
        self.reject(reason, detail)
        self._secure_reply(reader_id, wire.SecureReject(reason))

    # -- CPP + DH --

    def on_ServerHello(self, channel: Channel, src: EntityId, msg: wire.ServerHello) -> None:
        k = self.required_difficulty()
        p = issue_puzzle(self.suite, self.k_s, msg.reader_id, self.world.wall_clock_ms(), k)
        self.send(Channel.INTERNET, msg.reader_id, wire.PuzzleChallenge(p.hx, p.partial_x, p.t, p.k))

    def on_DhInit(self, channel: Channel, src: EntityId, msg: wire.DhInit) -> None:
        rid = msg.reader_id
        required = self.required_difficulty()
        if required > 0:
            if msg.k < required:
                self._reject_plain(rid, Reason.PUZZLE_REQUIRED)
                return
            failure = verify_puzzle(
                self.suite, self.k_s, rid, msg.t, msg.k, msg.solution, self.world.wall_clock_ms(), self.puzzle_expiry_ms
            )
            if failure is not None:
                self._reject_plain(rid, failure)
                return
        failure = check_certificate(msg.cert, self.ca_public, self.suite, self.world.wall_clock_ms(), subject=rid, revoked=self.crl)
        if failure is not None:
            self._reject_plain(rid, failure, "reader certificate")
            return
        eph = KeyPair.generate(self.rng)
        n_s = Nonce.fresh(self.rng)
        transcript = _dh_transcript(rid, self.id, msg.n_r, n_s, msg.dh_pub, eph.public)
        try:
            key = self.suite.dh_exchange(eph, msg.dh_pub, transcript, KeyRole.SESSION_RS)
        except HandshakeError as exc:
            self._reject_plain(rid, Reason.GROUP_ELEMENT_INVALID, str(exc))
            return
        self._handshakes[rid] = _Link(msg.n_r, n_s, key, transcript=transcript, reader_cert=msg.cert)
        sig = self.suite.sign(self.keypair, b"S" + transcript)
        self.send(Channel.INTERNET, rid, wire.DhResp(self.id, n_s, self.certificate, eph.public, sig))

    def on_DhFinish(self, channel: Channel, src: EntityId, msg: wire.DhFinish) -> None:
        link = self._handshakes.pop(msg.reader_id, None)
        if link is None:
            self.reject(Reason.NO_SESSION, "handshake finish without init")
            return
        if not self.suite.verify_sig(link.reader_cert.public_key, b"R" + link.transcript, msg.sig):
            self._reject_plain(msg.reader_id, Reason.CERT_INVALID, "reader handshake signature")
            return
        self.links[msg.reader_id] = link
        self.world.complete("dh", self.id, msg.reader_id, (link.n_r, link.n_s, link.key.raw))
        mac = self.suite.mac(link.key, b"ack" + _nonce_bytes(link.n_r, link.n_s))
        self.send(Channel.INTERNET, msg.reader_id, wire.DhAck(self.id, mac))

    # -- secured requests --

    def on_Secure(self, channel: Channel, src: EntityId, msg: wire.Secure) -> None:
        link = self.links.get(msg.reader_id)
        if link is None:
            self.reject(Reason.NOT_CONNECTED, "no reader link")
            return
        try:
            inner = self.open_frame(link.key, msg.inner)
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        handler = {
            wire.TokenRequest: self._on_token_request,
            wire.KeyRequest: self._on_key_request,
            wire.BedsideKeyRequest: self._on_bedside_key_request,
            wire.BedsideAnswer: self._on_bedside_answer,
            wire.BedsideLogChunk: self._on_bedside_chunk,
        }.get(type(inner))
        if handler is None:
            self.reject(Reason.MALFORMED, f"unexpected {type(inner).__name__}")
            return
        handler(msg.reader_id, link, inner)

    def _on_token_request(self, rid: EntityId, link: _Link, req: wire.TokenRequest) -> None:
        if req.reader_id != rid:
            self._secure_reject(rid, Reason.NONCE_MISMATCH, "reader id")
            return
        k_sc = self.cards.get(req.card_id)
        if k_sc is None:
            self._secure_reject(rid, Reason.UNKNOWN_ENTITY, "card not registered")
            return
        replay_key = (req.card_id, req.n_c, req.n_r)
        try:
            m: wire.MSC1 = self.open(k_sc, req.m_sc1, wire.MSC1)
            if (m.reader_id, m.n_r, m.n_c) != (rid, req.n_r, req.n_c) or m.n_s != link.n_s:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "m_SC1 binding")
            if replay_key in self.seen_token_requests:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "token request replayed")
            failure = check_certificate(
                m.cert, self.ca_public, self.suite, self.world.wall_clock_ms(), subject=req.card_id, revoked=self.crl,
                expired_reason=Reason.CARD_EXPIRED, revoked_reason=Reason.CARD_REVOKED,
            )
            if failure is not None:
                raise ProtocolFailure(failure, "card certificate")
            if m.cert.privilege is None:
                raise ProtocolFailure(Reason.CERT_INVALID, "card certificate without privilege")
        except ProtocolFailure as exc:
            self._secure_reject(rid, exc.reason, exc.detail)
            return
        self.seen_token_requests.add(replay_key)
        k_rc = self.rng.randbytes(16)
        token_r = self.seal(
            link.key, wire.TokenR(k_rc, req.n_r, req.n_c, rid, req.card_id, self.token_lifetime_ms, m.cert.privilege)
        )
        token_c = self.seal(k_sc, wire.TokenC(k_rc, req.n_r, req.n_c, rid, req.card_id))
        self.card_tokens[req.card_id] = _CardToken(rid, req.n_r, req.n_c, link.n_s, m.cert.privilege)
        self._secure_reply(rid, wire.TokenResponse(token_r, token_c))

    def _on_key_request(self, rid: EntityId, link: _Link, req: wire.KeyRequest) -> None:
        try:
            if req.reader_id != rid:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "reader id")
            k_sc = self.cards.get(req.card_id)
            token = self.card_tokens.get(req.card_id)
            if k_sc is None or token is None:
                raise ProtocolFailure(Reason.M_SC2_INVALID, "no card token on record")
            m: wire.MSC2 = self.open(k_sc, req.m_sc2, wire.MSC2)
            if m.status != 1 or m.n_c != req.n_c or m.n_s != req.n_s:
                raise ProtocolFailure(Reason.M_SC2_INVALID, "m_SC2 contents")
            if (m.n_c, m.n_s) != (token.n_c, token.n_s) or token.reader_id != rid:
                raise ProtocolFailure(Reason.NONCE_MISMATCH, "m_SC2 not from the token session")
            if bytes(req.m_sc2) in self.used_m_sc2:
                raise ProtocolFailure(Reason.M_SC2_REPLAYED)
            if req.card_id in self.crl:
                raise ProtocolFailure(Reason.CARD_REVOKED)
        except ProtocolFailure as exc:
            if exc.reason is Reason.MAC_FAILURE:
                exc = ProtocolFailure(Reason.M_SC2_INVALID, "m_SC2 authentication")
            self._secure_reject(rid, exc.reason, exc.detail)
            return
        self.used_m_sc2.add(bytes(req.m_sc2))
        privilege = token.privilege
        if privilege > Privilege.READ_ONLY:
            zone = getattr(self.world.entities.get(rid), "zone", "unknown")
            if not self.policy.permits_write(zone, req.card_id, self.world.wall_clock_ms()):
                self.reject(Reason.NETWORK_POLICY, "write privilege downgraded to read-only")
                privilege = Privilege.READ_ONLY
        self.grants.append((req.card_id, req.implant_id, privilege))
        self._issue_session_key(rid, link, req.implant_id, req.n_r, req.n_i, req.card_id, req.n_c, privilege)

    def _issue_session_key(
        self, rid: EntityId, link: _Link, implant_id: EntityId, n_r: Nonce, n_i: Nonce, card_id: EntityId, n_c: Nonce, privilege: Privilege
    ) -> None:
        k_ri = self.rng.randbytes(16)
        m_r = self.seal(link.key, wire.MR(k_ri, n_r, n_i, implant_id))
        k_si = self.implants.get(implant_id)
        if k_si is not None:
            m_i = self.seal(k_si, wire.MI(k_ri, n_r, n_i, rid, card_id, n_c, privilege))
            self._secure_reply(rid, wire.KeyResponse(m_r, m_i))
            return
        # Not ours: ask the implant's home hospital via the manufacturer.
        if self.manufacturer_id is None or self.manufacturer_id not in self.server_links:
            self._secure_reject(rid, Reason.SERVER_LINK_FAILURE, "no manufacturer link")
            return
        self._request_ids += 1
        self._remote_pending[self._request_ids] = (rid, m_r)
        req = wire.MiRequest(self._request_ids, self.id, implant_id, k_ri, n_r, n_i, rid, card_id, n_c, privilege)
        self._envelope(self.manufacturer_id, req)

    # -- bedside --

    def _on_bedside_key_request(self, rid: EntityId, link: _Link, req: wire.BedsideKeyRequest) -> None:
        if rid not in self.bedside_readers or req.reader_id != rid:
            self._secure_reject(rid, Reason.UNKNOWN_ENTITY, "not a registered bedside reader")
            return
        if req.implant_id not in self.implants:
            self._secure_reject(rid, Reason.IMPLANT_UNKNOWN)
            return
        replay_key = (rid, req.implant_id, req.n_r, req.n_i)
        if replay_key in self.seen_bedside_requests:
            self._secure_reject(rid, Reason.NONCE_MISMATCH, "bedside request replayed")
            return
        self.seen_bedside_requests.add(replay_key)
        commands = list(self.bedside_plan.get(req.implant_id, []))
        self._bedside_runs[rid] = _BedsideRun(rid, req.implant_id, req.n_r, req.n_i, commands)
        self.bedside_logs.setdefault(req.implant_id, [])
        self.grants.append((EntityId.null(), req.implant_id, Privilege.READ_ONLY))
        self._issue_session_key(rid, link, req.implant_id, req.n_r, req.n_i, EntityId.null(), Nonce(0), Privilege.READ_ONLY)
        self._bedside_send_next(rid, req.implant_id)

    def _bedside_send_next(self, rid: EntityId, implant_id: EntityId) -> None:
        run = self._bedside_runs.get(rid)
        if run is None or run.waiting or run.index >= len(run.commands):
            return
        cmd = run.commands[run.index]
        mac = self.suite.mac(self.implants[implant_id], cmd.to_bytes() + _nonce_bytes(run.n_r, run.n_i))
        run.waiting = True
        self._secure_reply(rid, wire.BedsideCommand(run.index, cmd, mac))

    def _bedside_done(self, rid: EntityId, implant_id: EntityId, index: int, cmd: Command, status: int, data: bytes) -> None:
        run = self._bedside_runs.get(rid)
        if run is None or index != run.index:
            return
        self.bedside_logs[implant_id].append((cmd, status, data))
        run.index += 1
        run.n_i = run.n_i.incremented()
        run.waiting = False
        self._bedside_send_next(rid, implant_id)

    def _on_bedside_answer(self, rid: EntityId, link: _Link, msg: wire.BedsideAnswer) -> None:
        run = self._bedside_runs.get(rid)
        if run is not None:
            self._bedside_done(rid, run.implant_id, msg.index, msg.cmd, msg.status, msg.data)

    def _on_bedside_chunk(self, rid: EntityId, link: _Link, msg: wire.BedsideLogChunk) -> None:
        run = self._bedside_runs.get(rid)
        if run is None or msg.index != run.index:
            return
        run.parts[msg.chunk] = msg.data
        if len(run.parts) == msg.count:
            data = b"".join(run.parts[i] for i in range(msg.count))
            run.parts = {}
            self._bedside_done(rid, run.implant_id, msg.index, run.commands[run.index], STATUS_OK, data)

    # -- server-to-server --

    def _envelope(self, dst: EntityId, msg: wire.Message) -> None:
        key = self.server_links.get(dst)
        if key is None:
            raise ProtocolFailure(Reason.SERVER_LINK_FAILURE, f"no link to {dst.name}")
        self.send(Channel.INTERNET, dst, wire.ServerEnvelope(self.id, dst, self.seal_frame(key, msg)))

    def on_ServerEnvelope(self, channel: Channel, src: EntityId, msg: wire.ServerEnvelope) -> None:
        key = self.server_links.get(msg.src_id)
        if key is None or msg.dst_id != self.id:
            self.reject(Reason.SERVER_LINK_FAILURE, "envelope from unlinked server")
            return
        try:
            inner = self.open_frame(key, msg.inner)
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        if isinstance(inner, wire.MiRequest):
            self._on_mi_request(msg.src_id, inner)
        elif isinstance(inner, wire.MiResponse):
            pending = self._remote_pending.pop(inner.request_id, None)
            if pending is not None:
                rid, m_r = pending
                self._secure_reply(rid, wire.KeyResponse(m_r, inner.m_i))
        elif isinstance(inner, wire.MiFailure):
            pending = self._remote_pending.pop(inner.request_id, None)
            if pending is not None:
                self._secure_reject(pending[0], inner.reason, "remote establishment")

    def _on_mi_request(self, via: EntityId, req: wire.MiRequest) -> None:
        k_si = self.implants.get(req.implant_id)
        if k_si is None:
            self.reject(Reason.IMPLANT_UNKNOWN, "not registered here")
            self.guarded(lambda: self._envelope(via, wire.MiFailure(req.request_id, req.origin_id, Reason.IMPLANT_UNKNOWN)))
            return
        m_i = self.seal(k_si, wire.MI(req.key, req.n_r, req.n_i, req.reader_id, req.card_id, req.n_c, req.privilege))
        self.guarded(lambda: self._envelope(via, wire.MiResponse(req.request_id, req.origin_id, req.implant_id, m_i)))


class ManufacturerServer(Entity):
    """Knows every implant's home hospital and relays m_I requests between hospitals."""

    def __init__(self, eid: EntityId, rng: random.Random, suite: CryptoSuite):
        super().__init__(eid, rng, suite)
        self.registry: dict[EntityId, EntityId] = {}
        self.server_links: dict[EntityId, SymmetricKey] = {}

    def _envelope(self, dst: EntityId, msg: wire.Message) -> None:
        key = self.server_links.get(dst)
        if key is None:
            raise ProtocolFailure(Reason.SERVER_LINK_FAILURE, f"no link to {dst.name}")
        self.send(Channel.INTERNET, dst, wire.ServerEnvelope(self.id, dst, self.seal_frame(key, msg)))

    def on_ServerEnvelope(self, channel: Channel, src: EntityId, msg: wire.ServerEnvelope) -> None:
        key = self.server_links.get(msg.src_id)
        if key is None or msg.dst_id != self.id:
            self.reject(Reason.SERVER_LINK_FAILURE, "envelope from unlinked server")
            return
        try:
            inner = self.open_frame(key, msg.inner)
        except ProtocolFailure as exc:
            self.reject(exc.reason, exc.detail)
            return
        if isinstance(inner, wire.MiRequest):
            home = self.registry.get(inner.implant_id)
            if home is None:
                self.reject(Reason.IMPLANT_UNKNOWN, inner.implant_id.name)
                reply = wire.MiFailure(inner.request_id, inner.origin_id, Reason.IMPLANT_UNKNOWN)
                self.guarded(lambda: self._envelope(msg.src_id, reply))
                return
            self.guarded(
                lambda: self._envelope(home, inner),
                lambda exc: self.guarded(
                    lambda: self._envelope(msg.src_id, wire.MiFailure(inner.request_id, inner.origin_id, exc.reason))
                ),
            )
        elif isinstance(inner, (wire.MiResponse, wire.MiFailure)):
            self.guarded(lambda: self._envelope(inner.origin_id, inner))
