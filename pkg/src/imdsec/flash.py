"""Signature records kept by the implant for write commands, and their audit."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .crypto import CryptoSuite
from .types import CMD_BYTES, ID_BYTES, NONCE_BYTES, SIG_BYTES, Command, EntityId, Nonce

RECORD_BYTES = SIG_BYTES + CMD_BYTES + ID_BYTES + NONCE_BYTES + NONCE_BYTES
DEFAULT_FLASH_BYTES = 32 * 1024
# Attempt count quoted for 32 kB in the published scenario analysis; the ring
# buffer itself yields floor(32768 / 72) = 455.
QUOTED_OVERWRITE_ATTEMPTS = 456


def signed_message(cmd: Command, reader_nonce: Nonce, card_nonce: Nonce) -> bytes:
    """Bytes the card signs: CMD || N_R || N_C."""
    return cmd.to_bytes() + reader_nonce.to_bytes() + card_nonce.to_bytes()


@dataclass(frozen=True)
class SignatureRecord:
    sig: bytes
    cmd: Command
    card_id: EntityId
    card_nonce: Nonce
    reader_nonce: Nonce

    def __post_init__(self) -> None:
        if len(self.sig) != SIG_BYTES:
            raise ValueError("signature must be 48 bytes")

    def to_bytes(self) -> bytes:
        return (
            self.sig
            + self.cmd.to_bytes()
            + self.card_id.raw
            + self.card_nonce.to_bytes()
            + self.reader_nonce.to_bytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignatureRecord":
        if len(data) != RECORD_BYTES:
            raise ValueError(f"record must be {RECORD_BYTES} bytes, got {len(data)}")
        o = SIG_BYTES
        cmd = Command.from_bytes(data[o : o + CMD_BYTES])
        o += CMD_BYTES
        card = EntityId(data[o : o + ID_BYTES])
        o += ID_BYTES
        n_c = Nonce(int.from_bytes(data[o : o + NONCE_BYTES], "big"))
        n_r = Nonce(int.from_bytes(data[o + NONCE_BYTES :], "big"))
        return cls(data[:SIG_BYTES], cmd, card, n_c, n_r)

    @property
    def message(self) -> bytes:
        return signed_message(self.cmd, self.reader_nonce, self.card_nonce)


@dataclass
class SignatureFlash:
    """Fixed-size ring buffer; the oldest slot is overwritten first."""

    capacity_bytes: int = DEFAULT_FLASH_BYTES
    slots: list = field(default_factory=list)
    next_slot: int = 0
    writes: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("flash too small for a single record")

    @property
    def capacity(self) -> int:
        return self.capacity_bytes // RECORD_BYTES

    def store(self, record: SignatureRecord) -> int:
        slot = self.next_slot
        if slot < len(self.slots):
            self.slots[slot] = record
        else:
            self.slots.append(record)
        self.next_slot = (slot + 1) % self.capacity
        self.writes += 1
        return slot

    def records(self) -> list[SignatureRecord]:
        """Records oldest first."""
        if len(self.slots) < self.capacity:
            return list(self.slots)
        return self.slots[self.next_slot :] + self.slots[: self.next_slot]

    def dump(self) -> bytes:
        return b"".join(r.to_bytes() for r in self.records())


def overwrite_attempts(capacity_bytes: int = DEFAULT_FLASH_BYTES) -> int:
    """Write commands needed after a target record until its slot is reused."""
    flash = SignatureFlash(capacity_bytes)
    dummy = SignatureRecord(bytes(SIG_BYTES), Command(2), EntityId.null(), Nonce(0), Nonce(0))
    # Pre-fill arbitrarily so the target lands mid-buffer.
    for _ in range(flash.capacity // 3):
        flash.store(dummy)
    target = SignatureRecord(b"\xff" * SIG_BYTES, Command(2, 1), EntityId.from_name("target"), Nonce(1), Nonce(1))
    slot = flash.store(target)
    attempts = 0
    while flash.slots[slot] is target:
        flash.store(dummy)
        attempts += 1
    return attempts


@dataclass(frozen=True)
class AuditEntry:
    index: int
    ok: bool
    detail: str
    record: Optional[SignatureRecord] = None


def audit_dump(dump: bytes, card_public_key: bytes, suite: CryptoSuite, card_id: Optional[EntityId] = None) -> list[AuditEntry]:
    """Verify every record; a short tail becomes a failed entry and auditing stops there."""
    out = []
    for i in range(0, len(dump), RECORD_BYTES):
        chunk = dump[i : i + RECORD_BYTES]
        idx = i // RECORD_BYTES
        if len(chunk) != RECORD_BYTES:
            out.append(AuditEntry(idx, False, f"malformed: {len(chunk)} trailing bytes"))
            break
        try:
            rec = SignatureRecord.from_bytes(chunk)
        except ValueError as exc:
            out.append(AuditEntry(idx, False, f"malformed: {exc}"))
            continue
        if card_id is not None and rec.card_id != card_id:
            out.append(AuditEntry(idx, False, "other-card", rec))
        elif suite.verify_sig(card_public_key, rec.message, rec.sig):
            out.append(AuditEntry(idx, True, "verified", rec))
        else:
            out.append(AuditEntry(idx, False, "signature-invalid", rec))
    return out
