"""Tag-length-body frame codec and every message exchanged on a channel.

Frame layout::

    tag (1 B) || length (2 B, big-endian) || body

The body is the message's fields in declaration order, big-endian, no
padding. Fixed-width kinds occupy exactly their width; variable kinds carry
a 2-byte length prefix. AEAD blobs wrapping a fixed-size payload are fixed
width (payload + 24 bytes of IV and tag).
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import Any, ClassVar, Iterator, Optional

from .crypto import AEAD_OVERHEAD
from .types import (
    ANS_BYTES,
    CMD_BYTES,
    ID_BYTES,
    KEY_BYTES,
    MAC_BYTES,
    NONCE_BYTES,
    PUBKEY_BYTES,
    SIG_BYTES,
    Certificate,
    Command,
    EntityId,
    Nonce,
    Privilege,
    Reason,
)

HEADER_BYTES = 3
MAX_BODY = 0xFFFF
DEFAULT_CHUNK_BYTES = 256


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class UnknownTag(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


# -- field kinds ---------------------------------------------------------------


class Kind:
    name = "kind"
    size: Optional[int] = None
    secret_atom = False

    def pack(self, value: Any) -> bytes:
        raise NotImplementedError

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        raise NotImplementedError


def _take(data: bytes, off: int, n: int) -> bytes:
    if off + n > len(data):
        raise Truncated(f"need {n} bytes at offset {off}, have {len(data) - off}")
    return data[off : off + n]


class _Fixed(Kind):
    def __init__(self, name: str, size: int):
        self.name, self.size = name, size

    def pack(self, value: Any) -> bytes:
        raw = bytes(value)
        if len(raw) != self.size:
            raise EncodeError(f"{self.name} must be {self.size} bytes, got {len(raw)}")
        return raw

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        return _take(data, off, self.size), off + self.size


class _Uint(Kind):
    def __init__(self, size: int):
        self.size = size

    def pack(self, value: Any) -> bytes:
        try:
            return int(value).to_bytes(self.size, "big")
        except OverflowError as exc:
            raise EncodeError(f"value {value} exceeds {self.size * 8} bits") from exc

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        return int.from_bytes(_take(data, off, self.size), "big"), off + self.size


class _Id(Kind):
    size = ID_BYTES

    def pack(self, value: Any) -> bytes:
        if not isinstance(value, EntityId):
            raise EncodeError(f"expected EntityId, got {type(value).__name__}")
        return value.raw

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        return EntityId(_take(data, off, ID_BYTES)), off + ID_BYTES


class _Nonce(Kind):
    size = NONCE_BYTES

    def pack(self, value: Any) -> bytes:
        if not isinstance(value, Nonce):
            raise EncodeError(f"expected Nonce, got {type(value).__name__}")
        return value.to_bytes()

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        return Nonce(int.from_bytes(_take(data, off, NONCE_BYTES), "big")), off + NONCE_BYTES


class _Cmd(Kind):
    size = CMD_BYTES
    secret_atom = True

    def pack(self, value: Any) -> bytes:
        if not isinstance(value, Command):
            raise EncodeError(f"expected Command, got {type(value).__name__}")
        return value.to_bytes()

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        raw = _take(data, off, CMD_BYTES)
        try:
            return Command.from_bytes(raw), off + CMD_BYTES
        except ValueError as exc:
            raise DecodeError(f"bad command: {exc}") from exc


class _Priv(Kind):
    size = 1

    def pack(self, value: Any) -> bytes:
        return bytes([0 if value is None else int(Privilege(value))])

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        b = _take(data, off, 1)[0]
        if b == 0:
            return None, off + 1
        try:
            return Privilege(b), off + 1
        except ValueError as exc:
            raise DecodeError(f"bad privilege byte {b}") from exc


_REASONS = list(Reason)


class _Reason(Kind):
    size = 1

    def pack(self, value: Any) -> bytes:
        return bytes([_REASONS.index(Reason(value))])

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        b = _take(data, off, 1)[0]
        if b >= len(_REASONS):
            raise DecodeError(f"bad reason code {b}")
        return _REASONS[b], off + 1


class _Var(Kind):
    def pack(self, value: Any) -> bytes:
        raw = bytes(value)
        if len(raw) > MAX_BODY:
            raise EncodeError("variable field longer than 65535 bytes")
        return len(raw).to_bytes(2, "big") + raw

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        n = int.from_bytes(_take(data, off, 2), "big")
        return _take(data, off + 2, n), off + 2 + n


class _Cert(Kind):
    size = ID_BYTES + 1 + 8 + PUBKEY_BYTES + SIG_BYTES

    def pack(self, value: Any) -> bytes:
        if not isinstance(value, Certificate):
            raise EncodeError("expected Certificate")
        if len(value.public_key) != PUBKEY_BYTES or len(value.signature) != SIG_BYTES:
            raise EncodeError("certificate key or signature has wrong width")
        return value.tbs() + value.signature

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        subject, o = ID.unpack(data, off)
        priv, o = PRIV.unpack(data, o)
        not_after, o = U64.unpack(data, o)
        pub, o = PUB.unpack(data, o)
        sig, o = SIG.unpack(data, o)
        return Certificate(subject, priv, pub, not_after, sig), o


class Blob(Kind):
    """AEAD ciphertext of a payload; the payload type is part of the schema."""

    def __init__(self, payload: Any):
        self.payload = payload  # Payload subclass, or None for a nested frame
        self.name = "blob:" + ("frame" if payload is None else payload.__name__)

    @property
    def ad(self) -> bytes:
        return b"FRAME" if self.payload is None else self.payload.__name__.encode()

    @property
    def size(self) -> Optional[int]:  # type: ignore[override]
        if self.payload is None:
            return None
        inner = self.payload.fixed_size()
        return None if inner is None else inner + AEAD_OVERHEAD

    def pack(self, value: Any) -> bytes:
        if self.size is None:
            return _Var().pack(value)
        return _Fixed("blob", self.size).pack(value)

    def unpack(self, data: bytes, off: int) -> tuple[Any, int]:
        if self.size is None:
            return _Var().unpack(data, off)
        return _Fixed("blob", self.size).unpack(data, off)


ID = _Id()
NONCE = _Nonce()
ANS_BULK = _Var()
KEY = _Fixed("key", KEY_BYTES)
MAC = _Fixed("mac", MAC_BYTES)
SIG = _Fixed("sig", SIG_BYTES)
PUB = _Fixed("pubkey", PUBKEY_BYTES)
PIN = _Fixed("pin", 8)
ANS = _Fixed("ans", ANS_BYTES)
CMD = _Cmd()
PRIV = _Priv()
REASON = _Reason()
CERT = _Cert()
U8, U16, U32, U64 = _Uint(1), _Uint(2), _Uint(4), _Uint(8)
VAR = _Var()

for _name, _kind in list(globals().items()):
    if isinstance(_kind, Kind) and _name.isupper():
        _kind.name = _name.lower()

# Atom kinds whose values the secrecy checks care about.
for _kind in (KEY, PIN, ANS, ANS_BULK, CMD):
    _kind.secret_atom = True


def wire(kind: Kind) -> Any:
    return field(metadata={"wire": kind})


# -- payload / message base classes -------------------------------------------


class Payload:
    """Fixed field layout with no header; the plaintext inside an AEAD blob."""

    @classmethod
    @functools.lru_cache(maxsize=None)
    def wire_fields(cls) -> tuple[tuple[str, Kind], ...]:
        return tuple((f.name, f.metadata["wire"]) for f in dataclasses.fields(cls))  # type: ignore[arg-type]

    @classmethod
    def fixed_size(cls) -> Optional[int]:
        total = 0
        for _, kind in cls.wire_fields():
            if kind.size is None:
                return None
            total += kind.size
        return total

    def pack(self) -> bytes:
        return b"".join(kind.pack(getattr(self, name)) for name, kind in self.wire_fields())

    @classmethod
    def unpack(cls, data: bytes) -> Any:
        values, off = cls._unpack_fields(data, 0)
        if off != len(data):
            raise TrailingBytes(f"{len(data) - off} bytes after {cls.__name__}")
        return cls(**values)

    @classmethod
    def _unpack_fields(cls, data: bytes, off: int) -> tuple[dict, int]:
        values = {}
        for name, kind in cls.wire_fields():
            values[name], off = kind.unpack(data, off)
        return values, off

    def items(self) -> Iterator[tuple[str, Kind, Any]]:
        for name, kind in self.wire_fields():
            yield name, kind, getattr(self, name)


class Message(Payload):
    TAG: ClassVar[int]


MESSAGES: dict[int, type] = {}


def message(tag: int):
    def register(cls):
        if tag in MESSAGES:
            raise ValueError(f"duplicate tag {tag:#x}")
        cls.TAG = tag
        MESSAGES[tag] = cls
        return cls

    return register


def encode_frame(msg: Message) -> bytes:
    if type(msg).TAG not in MESSAGES:
        raise EncodeError(f"unregistered message {type(msg).__name__}")
    body = msg.pack()
    if len(body) > MAX_BODY:
        raise EncodeError(f"body of {len(body)} bytes exceeds 16-bit length")
    return bytes([msg.TAG]) + len(body).to_bytes(2, "big") + body


def decode_frame(data: bytes) -> Message:
    data = bytes(data)
    if len(data) < HEADER_BYTES:
        raise Truncated(f"frame of {len(data)} bytes has no complete header")
    tag = data[0]
    cls = MESSAGES.get(tag)
    if cls is None:
        raise UnknownTag(f"unknown tag {tag:#04x}")
    declared = int.from_bytes(data[1:3], "big")
    if declared != len(data) - HEADER_BYTES:
        raise LengthMismatch(f"header says {declared} body bytes, frame carries {len(data) - HEADER_BYTES}")
    try:
        return cls.unpack(data[HEADER_BYTES:])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(str(exc)) from exc


# -- AEAD payloads -------------------------------------------------------------


@dataclass(frozen=True)
class MSC1(Payload):
    """Card -> server cryptogram of the five-pass exchange."""

    cert: Certificate = wire(CERT)
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)
    n_s: Nonce = wire(NONCE)
    n_c: Nonce = wire(NONCE)


@dataclass(frozen=True)
class TokenR(Payload):
    key: bytes = wire(KEY)
    n_r: Nonce = wire(NONCE)
    n_c: Nonce = wire(NONCE)
    reader_id: EntityId = wire(ID)
    card_id: EntityId = wire(ID)
    lifetime_ms: int = wire(U32)
    privilege: Optional[Privilege] = wire(PRIV)


@dataclass(frozen=True)
class TokenC(Payload):
    key: bytes = wire(KEY)
    n_r: Nonce = wire(NONCE)
    n_c: Nonce = wire(NONCE)
    reader_id: EntityId = wire(ID)
    card_id: EntityId = wire(ID)


@dataclass(frozen=True)
class PinBlock(Payload):
    pin: bytes = wire(PIN)
    n_r: Nonce = wire(NONCE)
    n_c: Nonce = wire(NONCE)


@dataclass(frozen=True)
class MSC2(Payload):
    status: int = wire(U8)
    n_c: Nonce = wire(NONCE)
    n_s: Nonce = wire(NONCE)


@dataclass(frozen=True)
class SignBlock(Payload):
    cmd: Command = wire(CMD)
    n_r: Nonce = wire(NONCE)
    n_c: Nonce = wire(NONCE)


@dataclass(frozen=True)
class SigBlock(Payload):
    cmd: Command = wire(CMD)
    n_r: Nonce = wire(NONCE)
    n_c: Nonce = wire(NONCE)
    sig: bytes = wire(SIG)


@dataclass(frozen=True)
class MR(Payload):
    key: bytes = wire(KEY)
    n_r: Nonce = wire(NONCE)
    n_i: Nonce = wire(NONCE)
    implant_id: EntityId = wire(ID)


@dataclass(frozen=True)
class MI(Payload):
    key: bytes = wire(KEY)
    n_r: Nonce = wire(NONCE)
    n_i: Nonce = wire(NONCE)
    reader_id: EntityId = wire(ID)
    card_id: EntityId = wire(ID)
    n_c: Nonce = wire(NONCE)
    privilege: Optional[Privilege] = wire(PRIV)


@dataclass(frozen=True)
class MRI(Payload):
    n_r: Nonce = wire(NONCE)
    n_i: Nonce = wire(NONCE)


@dataclass(frozen=True)
class CmdBlock(Payload):
    cmd: Command = wire(CMD)
    n_r: Nonce = wire(NONCE)
    n_i: Nonce = wire(NONCE)


@dataclass(frozen=True)
class SignedCmdBlock(Payload):
    """The card signature rides inside the ciphertext so the R-I MAC covers it."""

    cmd: Command = wire(CMD)
    n_r: Nonce = wire(NONCE)
    n_i: Nonce = wire(NONCE)
    sig: bytes = wire(SIG)


@dataclass(frozen=True)
class AnsBlock(Payload):
    ans: bytes = wire(ANS)
    n_i: Nonce = wire(NONCE)
    n_r: Nonce = wire(NONCE)


@dataclass(frozen=True)
class ChunkBlock(Payload):
    n_i: Nonce = wire(NONCE)
    n_r: Nonce = wire(NONCE)
    index: int = wire(U32)
    count: int = wire(U32)
    data: bytes = wire(ANS_BULK)


# -- reader <-> server (Internet) ---------------------------------------------


@message(0x01)
@dataclass(frozen=True)
class ServerHello(Message):
    reader_id: EntityId = wire(ID)


@message(0x02)
@dataclass(frozen=True)
class PuzzleChallenge(Message):
    hx: bytes = wire(VAR)
    partial_x: bytes = wire(VAR)
    t: int = wire(U64)
    k: int = wire(U8)


@message(0x03)
@dataclass(frozen=True)
class DhInit(Message):
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)
    cert: Certificate = wire(CERT)
    dh_pub: bytes = wire(PUB)
    t: int = wire(U64)
    k: int = wire(U8)
    solution: bytes = wire(VAR)


@message(0x04)
@dataclass(frozen=True)
class DhResp(Message):
    server_id: EntityId = wire(ID)
    n_s: Nonce = wire(NONCE)
    cert: Certificate = wire(CERT)
    dh_pub: bytes = wire(PUB)
    sig: bytes = wire(SIG)


@message(0x05)
@dataclass(frozen=True)
class DhFinish(Message):
    reader_id: EntityId = wire(ID)
    sig: bytes = wire(SIG)


@message(0x06)
@dataclass(frozen=True)
class DhAck(Message):
    server_id: EntityId = wire(ID)
    mac: bytes = wire(MAC)


@message(0x07)
@dataclass(frozen=True)
class Reject(Message):
    reason: Reason = wire(REASON)


@message(0x08)
@dataclass(frozen=True)
class Secure(Message):
    """Inner frame protected under the reader-server key K'_RS."""

    reader_id: EntityId = wire(ID)
    inner: bytes = wire(Blob(None))


@message(0x20)
@dataclass(frozen=True)
class TokenRequest(Message):
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)
    card_id: EntityId = wire(ID)
    n_c: Nonce = wire(NONCE)
    m_sc1: bytes = wire(Blob(MSC1))


@message(0x21)
@dataclass(frozen=True)
class TokenResponse(Message):
    token_r: bytes = wire(Blob(TokenR))
    token_c: bytes = wire(Blob(TokenC))


@message(0x22)
@dataclass(frozen=True)
class KeyRequest(Message):
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)
    implant_id: EntityId = wire(ID)
    n_i: Nonce = wire(NONCE)
    card_id: EntityId = wire(ID)
    n_c: Nonce = wire(NONCE)
    n_s: Nonce = wire(NONCE)
    m_sc2: bytes = wire(Blob(MSC2))


@message(0x23)
@dataclass(frozen=True)
class KeyResponse(Message):
    m_r: bytes = wire(Blob(MR))
    m_i: bytes = wire(Blob(MI))


@message(0x24)
@dataclass(frozen=True)
class SecureReject(Message):
    reason: Reason = wire(REASON)


@message(0x25)
@dataclass(frozen=True)
class BedsideKeyRequest(Message):
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)
    implant_id: EntityId = wire(ID)
    n_i: Nonce = wire(NONCE)


@message(0x26)
@dataclass(frozen=True)
class BedsideCommand(Message):
    index: int = wire(U32)
    cmd: Command = wire(CMD)
    server_mac: bytes = wire(MAC)


@message(0x27)
@dataclass(frozen=True)
class BedsideAnswer(Message):
    index: int = wire(U32)
    cmd: Command = wire(CMD)
    status: int = wire(U8)
    data: bytes = wire(VAR)


@message(0x28)
@dataclass(frozen=True)
class BedsideLogChunk(Message):
    index: int = wire(U32)
    chunk: int = wire(U32)
    count: int = wire(U32)
    data: bytes = wire(VAR)


# -- reader <-> card (contact interface) ----------------------------------------


@message(0x30)
@dataclass(frozen=True)
class RcHello(Message):
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)
    n_s: Nonce = wire(NONCE)


@message(0x31)
@dataclass(frozen=True)
class CardHello(Message):
    card_id: EntityId = wire(ID)
    n_c: Nonce = wire(NONCE)
    m_sc1: bytes = wire(Blob(MSC1))


@message(0x32)
@dataclass(frozen=True)
class RcConfirm(Message):
    mac: bytes = wire(MAC)
    token_c: bytes = wire(Blob(TokenC))


@message(0x33)
@dataclass(frozen=True)
class CardConfirm(Message):
    mac: bytes = wire(MAC)


@message(0x34)
@dataclass(frozen=True)
class PinVerify(Message):
    block: bytes = wire(Blob(PinBlock))


@message(0x35)
@dataclass(frozen=True)
class PinResult(Message):
    m_sc2: bytes = wire(Blob(MSC2))


@message(0x36)
@dataclass(frozen=True)
class SignRequest(Message):
    block: bytes = wire(Blob(SignBlock))


@message(0x37)
@dataclass(frozen=True)
class SignResponse(Message):
    block: bytes = wire(Blob(SigBlock))


@message(0x38)
@dataclass(frozen=True)
class CardError(Message):
    reason: Reason = wire(REASON)


# -- reader <-> implant (RF) ----------------------------------------------------


@message(0x40)
@dataclass(frozen=True)
class SkHello(Message):
    reader_id: EntityId = wire(ID)
    n_r: Nonce = wire(NONCE)


@message(0x41)
@dataclass(frozen=True)
class SkImplantHello(Message):
    implant_id: EntityId = wire(ID)
    n_i: Nonce = wire(NONCE)


@message(0x42)
@dataclass(frozen=True)
class SkKey(Message):
    m_i: bytes = wire(Blob(MI))
    m_ri: bytes = wire(Blob(MRI))


@message(0x43)
@dataclass(frozen=True)
class SkConfirm(Message):
    mac: bytes = wire(MAC)


@message(0x44)
@dataclass(frozen=True)
class CommandSigned(Message):
    block: bytes = wire(Blob(SignedCmdBlock))


@message(0x45)
@dataclass(frozen=True)
class CommandServerMac(Message):
    block: bytes = wire(Blob(CmdBlock))
    server_mac: bytes = wire(MAC)


@message(0x46)
@dataclass(frozen=True)
class CommandUnsigned(Message):
    block: bytes = wire(Blob(CmdBlock))


@message(0x47)
@dataclass(frozen=True)
class Answer(Message):
    block: bytes = wire(Blob(AnsBlock))


@message(0x48)
@dataclass(frozen=True)
class AnswerChunk(Message):
    block: bytes = wire(Blob(ChunkBlock))


@message(0x49)
@dataclass(frozen=True)
class OfflineConfirmR(Message):
    """Reader half of the offline key confirmation; the MAC covers every field."""

    n_r: Nonce = wire(NONCE)
    card_id: EntityId = wire(ID)
    n_c: Nonce = wire(NONCE)
    mac: bytes = wire(MAC)


@message(0x4A)
@dataclass(frozen=True)
class OfflineConfirmI(Message):
    mac: bytes = wire(MAC)


@message(0x4E)
@dataclass(frozen=True)
class PlainCommand(Message):
    """Unsecured reference exchange; used only by the energy baseline."""

    cmd: Command = wire(CMD)


@message(0x4F)
@dataclass(frozen=True)
class PlainAnswer(Message):
    ans: bytes = wire(ANS)


@message(0x4D)
@dataclass(frozen=True)
class PlainChunk(Message):
    index: int = wire(U32)
    count: int = wire(U32)
    data: bytes = wire(VAR)


# -- OOB (touch-to-access) -------------------------------------------------------


@message(0x50)
@dataclass(frozen=True)
class OobRequest(Message):
    reader_id: EntityId = wire(ID)


@message(0x51)
@dataclass(frozen=True)
class OobKey(Message):
    key: bytes = wire(KEY)
    n_i: Nonce = wire(NONCE)
    implant_id: EntityId = wire(ID)


# -- server <-> server (Internet) --------------------------------------------------


@message(0x60)
@dataclass(frozen=True)
class ServerEnvelope(Message):
    src_id: EntityId = wire(ID)
    dst_id: EntityId = wire(ID)
    inner: bytes = wire(Blob(None))


@message(0x61)
@dataclass(frozen=True)
class MiRequest(Message):
    request_id: int = wire(U32)
    origin_id: EntityId = wire(ID)
    implant_id: EntityId = wire(ID)
    key: bytes = wire(KEY)
    n_r: Nonce = wire(NONCE)
    n_i: Nonce = wire(NONCE)
    reader_id: EntityId = wire(ID)
    card_id: EntityId = wire(ID)
    n_c: Nonce = wire(NONCE)
    privilege: Optional[Privilege] = wire(PRIV)


@message(0x62)
@dataclass(frozen=True)
class MiResponse(Message):
    request_id: int = wire(U32)
    origin_id: EntityId = wire(ID)
    implant_id: EntityId = wire(ID)
    m_i: bytes = wire(Blob(MI))


@message(0x63)
@dataclass(frozen=True)
class MiFailure(Message):
    request_id: int = wire(U32)
    origin_id: EntityId = wire(ID)
    reason: Reason = wire(REASON)


def frame_size(msg: Message) -> int:
    return len(encode_frame(msg))
