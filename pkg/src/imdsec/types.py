"""Identity, nonce, key and command value types shared by every entity."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Optional

ID_BYTES = 12
NONCE_BYTES = 4
KEY_BYTES = 16
CMD_BYTES = 4
ANS_BYTES = 8
SIG_BYTES = 48
MAC_BYTES = 16
PUBKEY_BYTES = 25  # compressed P-192 point

_NONCE_MOD = 1 << 32


class Reason(str, enum.Enum):
    """Abort reasons surfaced by protocol runs."""

    CERT_INVALID = "cert-invalid"
    CERT_REVOKED = "cert-revoked"
    GROUP_ELEMENT_INVALID = "group-element-invalid"
    CARD_REVOKED = "card-revoked"
    CARD_EXPIRED = "card-expired"
    CARD_LOCKED = "card-locked"
    MAC_FAILURE = "mac-failure"
    NONCE_MISMATCH = "nonce-mismatch"
    TOKEN_EXPIRED = "token-expired"
    PIN_MISMATCH = "pin-mismatch"
    M_SC2_INVALID = "m_sc2-invalid"
    M_SC2_REPLAYED = "m_sc2-replayed"
    NETWORK_POLICY = "network-policy-violation"
    PRIVILEGE_VIOLATION = "privilege-violation"
    SESSION_EXPIRED = "session-expired"
    NO_SESSION = "no-session"
    OOB_UNAVAILABLE = "oob-unavailable"
    NR_REQUIRED = "nr-required"
    IMPLANT_UNKNOWN = "implant-unknown"
    SERVER_LINK_FAILURE = "server-link-failure"
    PUZZLE_EXPIRED = "expired"
    PUZZLE_WRONG = "wrong-solution"
    PUZZLE_REQUIRED = "puzzle-required"
    NOT_CONNECTED = "not-connected"
    UNKNOWN_ENTITY = "unknown-entity"
    MALFORMED = "malformed"
    ENERGY_DEFERRED = "energy-deferred"
    TIMEOUT = "timeout"


class ProtocolFailure(Exception):
    """A protocol run aborted; ``reason`` names the first check that failed."""

    def __init__(self, reason: Reason, detail: str = ""):
        self.reason = Reason(reason)
        self.detail = detail
        super().__init__(f"{self.reason.value}{': ' + detail if detail else ''}")


@dataclass(frozen=True, order=True)
class EntityId:
    raw: bytes

    def __post_init__(self) -> None:
        if len(self.raw) != ID_BYTES:
            raise ValueError(f"EntityId must be {ID_BYTES} bytes, got {len(self.raw)}")

    @classmethod
    def from_name(cls, name: str) -> "EntityId":
        data = name.encode()
        if len(data) > ID_BYTES:
            raise ValueError(f"name {name!r} longer than {ID_BYTES} bytes")
        return cls(data.ljust(ID_BYTES, b"\x00"))

    @classmethod
    def null(cls) -> "EntityId":
        return cls(bytes(ID_BYTES))

    @property
    def name(self) -> str:
        return self.raw.rstrip(b"\x00").decode(errors="replace")

    def __repr__(self) -> str:
        return f"EntityId({self.name!r})"


@dataclass(frozen=True, order=True)
class Nonce:
    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value < _NONCE_MOD:
            raise ValueError(f"nonce out of 32-bit range: {self.value}")

    @classmethod
    def fresh(cls, rng: random.Random) -> "Nonce":
        return cls(rng.getrandbits(32))

    def incremented(self, by: int = 1) -> "Nonce":
        return Nonce((self.value + by) % _NONCE_MOD)

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(NONCE_BYTES, "big")


class KeyRole(enum.Enum):
    PRESHARED_SI = "K_SI"
    PRESHARED_SC = "K_SC"
    SESSION_RC = "K'_RC"
    SESSION_RI = "K'_RI"
    SESSION_RS = "K'_RS"
    SERVER_LINK = "K_link"
    SERVER_SECRET = "K_S"


@dataclass(frozen=True)
class SymmetricKey:
    raw: bytes
    role: KeyRole

    def __post_init__(self) -> None:
        if len(self.raw) != KEY_BYTES:
            raise ValueError(f"symmetric keys are {KEY_BYTES * 8} bits")

    @classmethod
    def fresh(cls, rng: random.Random, role: KeyRole) -> "SymmetricKey":
        return cls(rng.randbytes(KEY_BYTES), role)

    def __repr__(self) -> str:
        return f"SymmetricKey({self.role.value}, {self.raw[:4].hex()}...)"


class Privilege(enum.IntEnum):
    READ_ONLY = 1
    READ_WRITE = 2
    READ_WRITE_FIRMWARE = 3


class Role(enum.Enum):
    PATIENT = "patient"
    NURSE = "nurse"
    RELATIVE = "relative"
    PHYSICIAN = "physician"
    PARAMEDIC = "paramedic"
    TECHNICIAN = "technician"


ROLE_PRIVILEGE = {
    Role.PATIENT: Privilege.READ_ONLY,
    Role.NURSE: Privilege.READ_ONLY,
    Role.RELATIVE: Privilege.READ_ONLY,
    Role.PHYSICIAN: Privilege.READ_WRITE,
    Role.PARAMEDIC: Privilege.READ_WRITE,
    Role.TECHNICIAN: Privilege.READ_WRITE_FIRMWARE,
}

# Offline (touch-to-access) sessions never exceed paramedic rights.
OFFLINE_PRIVILEGE_CAP = ROLE_PRIVILEGE[Role.PARAMEDIC]


class CommandKind(enum.IntEnum):
    READ_STATUS = 1
    WRITE_THERAPY = 2
    SUSPEND = 3
    RESUME = 4
    FIRMWARE_UPDATE = 5
    FINISH = 6


_REQUIRED = {
    CommandKind.READ_STATUS: Privilege.READ_ONLY,
    CommandKind.WRITE_THERAPY: Privilege.READ_WRITE,
    CommandKind.SUSPEND: Privilege.READ_WRITE,
    CommandKind.RESUME: Privilege.READ_WRITE,
    CommandKind.FIRMWARE_UPDATE: Privilege.READ_WRITE_FIRMWARE,
    CommandKind.FINISH: Privilege.READ_ONLY,
}

CMD_PAYLOAD_MAX = (1 << 24) - 1


def required_privilege(kind: CommandKind) -> Privilege:
    return _REQUIRED[CommandKind(kind)]


@dataclass(frozen=True)
class Command:
    """8-bit kind followed by a 24-bit argument; 32 bits on the wire.

    For ``READ_STATUS`` a non-zero payload requests a bulk log of that many
    bytes instead of the 64-bit status word.
    """

    kind: CommandKind
    payload: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CommandKind(self.kind))
        if not 0 <= self.payload <= CMD_PAYLOAD_MAX:
            raise ValueError(f"command payload exceeds 24 bits: {self.payload}")

    @property
    def required_privilege(self) -> Privilege:
        return required_privilege(self.kind)

    @property
    def is_write(self) -> bool:
        return self.required_privilege > Privilege.READ_ONLY

    def to_bytes(self) -> bytes:
        return bytes([int(self.kind)]) + self.payload.to_bytes(3, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Command":
        if len(data) != CMD_BYTES:
            raise ValueError("command must be 4 bytes")
        return cls(CommandKind(data[0]), int.from_bytes(data[1:], "big"))


@dataclass(frozen=True)
class Certificate:
    """CA-signed binding of subject, optional privilege and public key."""

    subject: EntityId
    privilege: Optional[Privilege]
    public_key: bytes
    not_after: int  # virtual ms; certificates past this instant are expired
    signature: bytes

    def tbs(self) -> bytes:
        """Bytes covered by the CA signature."""
        priv = 0 if self.privilege is None else int(self.privilege)
        return self.subject.raw + bytes([priv]) + self.not_after.to_bytes(8, "big") + self.public_key
