import pytest
from hypothesis import given, strategies as st

from imdsec import wire
from imdsec.crypto import AEAD_OVERHEAD
from imdsec.types import (
    ANS_BYTES,
    CMD_PAYLOAD_MAX,
    Command,
    CommandKind,
    EntityId,
    Nonce,
    Privilege,
    Reason,
    required_privilege,
)
from imdsec.pki import NEVER

ids = st.binary(min_size=wire.ID_BYTES, max_size=wire.ID_BYTES).map(EntityId)
nonces = st.integers(0, 2**32 - 1).map(Nonce)
commands = st.builds(Command, st.sampled_from(CommandKind), st.integers(0, CMD_PAYLOAD_MAX))
privs = st.sampled_from(Privilege)


def _certs():
    return st.builds(
        wire.Certificate,
        ids,
        st.none() | privs,
        st.binary(min_size=wire.PUBKEY_BYTES, max_size=wire.PUBKEY_BYTES),
        st.integers(0, NEVER),
        st.binary(min_size=wire.SIG_BYTES, max_size=wire.SIG_BYTES),
    )


def strategy_for(kind):
    if isinstance(kind, wire.Blob):
        size = kind.size
        return st.binary(min_size=size, max_size=size) if size else st.binary(max_size=300)
    if kind is wire.ID:
        return ids
    if kind is wire.NONCE:
        return nonces
    if kind is wire.CMD:
        return commands
    if kind is wire.PRIV:
        return privs
    if kind is wire.REASON:
        return st.sampled_from(Reason)
    if kind is wire.CERT:
        return _certs()
    if isinstance(kind, wire._Uint):
        return st.integers(0, 2 ** (8 * kind.size) - 1)
    if kind.size is None:
        return st.binary(max_size=300)
    return st.binary(min_size=kind.size, max_size=kind.size)


def message_strategy(cls):
    return st.builds(cls, **{name: strategy_for(kind) for name, kind in cls.wire_fields()})


any_message = st.sampled_from(sorted(wire.MESSAGES.values(), key=lambda c: c.TAG)).flatmap(message_strategy)
phase_three = st.sampled_from([wire.SkHello, wire.SkImplantHello, wire.SkKey, wire.SkConfirm]).flatmap(message_strategy)


@given(any_message)
def test_every_message_roundtrips(msg):
    assert wire.decode_frame(wire.encode_frame(msg)) == msg


@given(phase_three)
def test_session_key_messages_roundtrip(msg):
    frame = wire.encode_frame(msg)
    assert frame[0] == msg.TAG
    assert wire.decode_frame(frame) == msg


def test_read_status_zero_body():
    frame = wire.encode_frame(wire.PlainCommand(Command(CommandKind.READ_STATUS, 0)))
    body = frame[wire.HEADER_BYTES:]
    assert frame[0] == wire.PlainCommand.TAG
    assert int.from_bytes(frame[1:3], "big") == len(body) == 4
    assert body == bytes([CommandKind.READ_STATUS]) + b"\x00\x00\x00"


def test_signed_command_body_length():
    # CMD + N_R + N_I = 12 payload bytes, plus the 48-byte signature, sealed as one blob.
    msg = wire.CommandSigned(bytes(AEAD_OVERHEAD + 12 + 48))
    frame = wire.encode_frame(msg)
    assert len(frame) - wire.HEADER_BYTES == AEAD_OVERHEAD + 12 + 48


def test_empty_frame_is_truncated():
    with pytest.raises(wire.Truncated):
        wire.decode_frame(b"")


@given(any_message, st.sampled_from([1, 2]), st.integers(1, 255))
def test_length_byte_mutation_detected(msg, pos, delta):
    frame = bytearray(wire.encode_frame(msg))
    frame[pos] = (frame[pos] + delta) % 256
    with pytest.raises(wire.LengthMismatch):
        wire.decode_frame(bytes(frame))


def test_unknown_tag():
    unused = next(t for t in range(256) if t not in wire.MESSAGES)
    with pytest.raises(wire.UnknownTag):
        wire.decode_frame(bytes([unused, 0, 0]))


@given(any_message, st.data())
def test_truncated_body_never_decodes_silently(msg, data):
    frame = wire.encode_frame(msg)
    cut = data.draw(st.integers(wire.HEADER_BYTES, len(frame) - 1)) if len(frame) > wire.HEADER_BYTES else None
    if cut is None:
        return
    body = frame[wire.HEADER_BYTES:cut]
    with pytest.raises(wire.DecodeError):
        wire.decode_frame(bytes([frame[0]]) + len(body).to_bytes(2, "big") + body)


@given(nonces, ids, commands)
def test_field_widths(n, eid, cmd):
    assert len(wire.NONCE.pack(n)) == 4
    assert len(wire.ID.pack(eid)) == 12
    assert len(wire.CMD.pack(cmd)) == 4
    assert wire.ANS.size == ANS_BYTES == 8
    assert wire.SIG.size == 48


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**33))
def test_nonce_increment_wraps(v, by):
    assert Nonce(v).incremented(by).value == (v + by) % 2**32


def test_nonce_wrap_edge():
    assert Nonce(2**32 - 1).incremented() == Nonce(0)
    with pytest.raises(ValueError):
        Nonce(2**32)


def test_command_payload_limit():
    with pytest.raises(ValueError):
        Command(CommandKind.WRITE_THERAPY, CMD_PAYLOAD_MAX + 1)


@given(privs, privs, privs)
def test_privilege_total_order(a, b, c):
    assert (a <= b) or (b <= a)
    if a <= b and b <= c:
        assert a <= c


@given(st.sampled_from(CommandKind))
def test_required_privilege_deterministic(kind):
    assert required_privilege(kind) is required_privilege(kind) is Command(kind).required_privilege
