import random

import pytest
from hypothesis import given, strategies as st

from imdsec.crypto import CryptoSuite, KeyPair
from imdsec.flash import (
    DEFAULT_FLASH_BYTES,
    RECORD_BYTES,
    SignatureFlash,
    SignatureRecord,
    audit_dump,
    overwrite_attempts,
    signed_message,
)
from imdsec.protocol import imd_store_signature
from imdsec.types import Command, CommandKind, EntityId, Nonce

suite = CryptoSuite()
KP = KeyPair.generate(random.Random(8))
CARD = EntityId.from_name("card-1")


def record(i, kp=KP):
    cmd = Command(CommandKind.WRITE_THERAPY, i % 200)
    n_c, n_r = Nonce(i), Nonce(i + 1)
    return SignatureRecord(suite.sign(kp, signed_message(cmd, n_r, n_c)), cmd, CARD, n_c, n_r)


def test_record_is_72_bytes():
    assert RECORD_BYTES == 72
    assert len(record(0).to_bytes()) == 72


def test_capacity():
    assert SignatureFlash().capacity == DEFAULT_FLASH_BYTES // 72 == 455


def test_first_slot_is_zero(eco):
    assert imd_store_signature(eco.implant, record(0)) == 0


def test_overwrite_needs_455_more_writes():
    # The published figure is 456; see the decisions ledger.
    assert overwrite_attempts() == 455
    assert overwrite_attempts() in (455, 456)


@given(st.integers(1, 40), st.integers(0, 120))
def test_ring_buffer_keeps_newest(cap, n):
    flash = SignatureFlash(cap * RECORD_BYTES)
    recs = [SignatureRecord(bytes(48), Command(2, i), CARD, Nonce(i), Nonce(0)) for i in range(n)]
    for r in recs:
        flash.store(r)
    assert flash.records() == recs[-cap:]
    assert len(flash.dump()) == min(n, cap) * RECORD_BYTES


@given(st.integers(0, 2**24 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_record_roundtrip(p, a, b):
    r = SignatureRecord(bytes(range(48)), Command(CommandKind.WRITE_THERAPY, p), CARD, Nonce(a), Nonce(b))
    assert SignatureRecord.from_bytes(r.to_bytes()) == r


def test_audit_flags_exactly_the_forged_record():
    recs = [record(i) for i in range(5)]
    forged = SignatureRecord(record(2, KeyPair.generate(random.Random(99))).sig, recs[2].cmd, CARD, recs[2].card_nonce, recs[2].reader_nonce)
    recs[2] = forged
    entries = audit_dump(b"".join(r.to_bytes() for r in recs), KP.public, suite, card_id=CARD)
    assert [e.ok for e in entries] == [True, True, False, True, True]


def test_audit_short_tail_and_empty():
    assert audit_dump(b"", KP.public, suite) == []
    entries = audit_dump(record(1).to_bytes() + b"\x00" * 10, KP.public, suite)
    assert [e.ok for e in entries] == [True, False]


def test_too_small_flash():
    with pytest.raises(ValueError):
        SignatureFlash(71)
