"""Phase-by-phase behavior of the online protocol, driven through the simulator."""

import pytest

from imdsec import wire
from imdsec.entities import Implant, ReaderKind
from imdsec.flash import signed_message
from imdsec.netsim import Adversary, Channel, Deliver, Drop, Modify, DEFAULT_ADVERSARIAL
from imdsec.protocol import (
    EcosystemConfig,
    build_ecosystem,
    run_dh_handshake,
    run_main_phase,
    run_online_session,
    run_reader_card_auth,
    run_remote_hospital_establishment,
    run_session_key_establishment,
    run_user_auth,
)
from imdsec.types import Command, CommandKind, EntityId, KeyRole, Privilege, ProtocolFailure, Reason, SymmetricKey

from conftest import make_eco

READ = Command(CommandKind.READ_STATUS, 0)
WRITE = Command(CommandKind.WRITE_THERAPY, 90)


def fails_with(reason, fn, *args, **kw):
    with pytest.raises(ProtocolFailure) as exc:
        fn(*args, **kw)
    assert exc.value.reason is reason, exc.value
    return exc.value


def authed(eco, reader=None):
    reader = reader or eco.reader
    run_dh_handshake(eco, reader)
    run_reader_card_auth(eco, reader)
    run_user_auth(eco, eco.config.pin, reader)
    return reader


class Capture:
    """Adversary policy that records and optionally rewrites frames by message type."""

    def __init__(self, rewrite=None):
        self.rewrite = rewrite
        self.seen = []

    def __call__(self, adv, world, channel, src, dst, frame):
        self.seen.append((channel, frame))
        if self.rewrite is not None:
            new = self.rewrite(channel, frame)
            if new is Drop:
                return Drop()
            if new is not None:
                return Modify(new)
        return Deliver()


def with_policy(policy, **cfg):
    adv = Adversary(policy)
    cfg.setdefault("adversarial", DEFAULT_ADVERSARIAL | {Channel.CARD})
    return build_ecosystem(EcosystemConfig(**cfg), adv), adv


# -- phase I --


def test_dh_handshake_agrees(eco):
    k = run_dh_handshake(eco)
    assert k == eco.server.links[eco.reader.id].key
    assert k.role is KeyRole.SESSION_RS


def test_stolen_reader_rejected():
    eco = make_eco(reader_kind=ReaderKind.STOLEN)
    fails_with(Reason.CERT_REVOKED, run_dh_handshake, eco)


def test_forged_reader_rejected():
    eco = make_eco(reader_kind=ReaderKind.FORGED)
    fails_with(Reason.CERT_INVALID, run_dh_handshake, eco)


def test_handshake_under_load_needs_puzzle():
    eco = make_eco(background_load=500)
    run_dh_handshake(eco)
    assert eco.world.rejections == []
    assert any(wire.decode_frame(e.frame).__class__ is wire.PuzzleChallenge for e in eco.world.trace)


def test_reader_card_auth_shares_key(eco):
    run_dh_handshake(eco)
    k_rc, tl = run_reader_card_auth(eco)
    assert k_rc.raw == eco.card.flash.key
    assert tl == eco.config.token_lifetime_ms
    assert 0 <= eco.reader.clock() < 1_000  # token clock restarts at auth


def test_card_in_crl(eco):
    eco.revoke(eco.card.id)
    run_dh_handshake(eco)
    fails_with(Reason.CARD_REVOKED, run_reader_card_auth, eco)


def test_replayed_card_hello_breaks_token_binding():
    old = {}

    def rewrite(channel, frame):
        if channel is Channel.CARD and frame[0] == wire.CardHello.TAG:
            if "hello" not in old:
                old["hello"] = frame
            elif old.get("armed"):
                return old["hello"]
        return None

    eco, _ = with_policy(Capture(rewrite))
    run_dh_handshake(eco)
    run_reader_card_auth(eco)
    old["armed"] = True
    fails_with(Reason.NONCE_MISMATCH, run_reader_card_auth, eco)


def test_card_flash_survives_reinsertion(eco):
    run_dh_handshake(eco)
    run_reader_card_auth(eco)
    before = eco.card.flash
    eco.world.remove_card(eco.reader.id)
    fails_with(Reason.NOT_CONNECTED, run_user_auth, eco, eco.config.pin)
    eco.world.insert_card(eco.reader.id, eco.card.id)
    assert eco.card.flash == before
    assert run_user_auth(eco, eco.config.pin) is not None


# -- phase II --


def test_pin_lockout(eco):
    run_dh_handshake(eco)
    run_reader_card_auth(eco)
    fails_with(Reason.PIN_MISMATCH, run_user_auth, eco, "0000")
    fails_with(Reason.PIN_MISMATCH, run_user_auth, eco, "0000")
    fails_with(Reason.CARD_LOCKED, run_user_auth, eco, "0000")
    assert eco.card.locked
    fails_with(Reason.CARD_LOCKED, run_user_auth, eco, eco.config.pin)


def test_correct_pin_resets_retry_count(eco):
    run_dh_handshake(eco)
    run_reader_card_auth(eco)
    for _ in range(2):
        fails_with(Reason.PIN_MISMATCH, run_user_auth, eco, "1111")
    run_user_auth(eco, eco.config.pin)
    assert eco.card.pin_retry_count == 0


def test_replayed_pin_block_from_earlier_session_rejected():
    grab = {}

    def rewrite(channel, frame):
        if channel is Channel.CARD and frame[0] == wire.PinVerify.TAG:
            grab.setdefault("pin", frame)
            if grab.get("armed"):
                return grab["pin"]
        return None

    eco, _ = with_policy(Capture(rewrite))
    authed(eco)
    run_reader_card_auth(eco)  # fresh K'_RC and nonces
    grab["armed"] = True
    err = pytest.raises(ProtocolFailure, run_user_auth, eco, eco.config.pin).value
    assert err.reason in (Reason.MAC_FAILURE, Reason.NONCE_MISMATCH)


def test_stale_m_sc2_rejected_by_server(eco):
    authed(eco)
    stale = eco.reader.m_sc2
    run_reader_card_auth(eco)
    run_user_auth(eco, eco.config.pin)
    eco.reader.m_sc2 = stale
    fails_with(Reason.M_SC2_INVALID, run_session_key_establishment, eco)


def test_m_sc2_single_use(eco):
    authed(eco)
    run_session_key_establishment(eco)
    eco.world.advance(6_000)  # refill the harvested pool
    fails_with(Reason.M_SC2_REPLAYED, run_session_key_establishment, eco)


def test_token_lifetime_boundary():
    for offset, ok in ((-1, True), (0, False)):
        eco = make_eco(token_lifetime_ms=60_000)
        run_dh_handshake(eco)
        run_reader_card_auth(eco)
        eco.world.advance(60_000 + offset - eco.reader.clock())
        assert eco.reader.clock() == 60_000 + offset
        if ok:
            run_user_auth(eco, eco.config.pin)
        else:
            fails_with(Reason.TOKEN_EXPIRED, run_user_auth, eco, eco.config.pin)


# -- phase III --


def test_session_key_both_ends(eco):
    authed(eco)
    k = run_session_key_establishment(eco)
    assert eco.implant.session.key == k
    assert eco.implant.session.privilege is eco.card.certificate.privilege
    assert eco.implant.session.card_id == eco.card.id


def test_swapped_m_i_between_sessions_aborts():
    held = {}

    def rewrite(channel, frame):
        if channel is not Channel.RF or frame[0] != wire.SkKey.TAG:
            return None
        msg = wire.decode_frame(frame)
        if "m_i" not in held:
            held["m_i"] = msg.m_i
            return Drop
        return wire.encode_frame(wire.SkKey(held["m_i"], msg.m_ri))

    eco, _ = with_policy(Capture(rewrite))
    authed(eco)
    fails_with(Reason.TIMEOUT, run_session_key_establishment, eco)
    eco.world.advance(10_000)
    authed(eco, eco.remote_reader)
    mark = len(eco.world.rejections)
    with pytest.raises(ProtocolFailure):
        run_session_key_establishment(eco, eco.remote_reader)
    implant_side = [r.reason for r in eco.world.rejections[mark:] if r.entity == eco.implant.id]
    assert Reason.NONCE_MISMATCH in implant_side
    assert eco.implant.session is None


def test_outside_zone_downgrades_to_read_only():
    eco = make_eco(reader_zone="home")
    authed(eco)
    run_session_key_establishment(eco)
    assert eco.implant.session.privilege is Privilege.READ_ONLY
    assert run_main_phase(eco, READ).status == 0
    fails_with(Reason.PRIVILEGE_VIOLATION, run_main_phase, eco, WRITE)


def test_off_hours_downgrades():
    eco = make_eco(start_hour=22)
    authed(eco)
    run_session_key_establishment(eco)
    assert eco.implant.session.privilege is Privilege.READ_ONLY


def test_hello_lost_then_retried():
    lost = {"n": 0}

    def rewrite(channel, frame):
        if channel is Channel.RF and frame[0] == wire.SkHello.TAG and lost["n"] == 0:
            lost["n"] += 1
            return Drop
        return None

    eco, _ = with_policy(Capture(rewrite))
    authed(eco)
    eco.reader.establish_session(eco.implant.id, retries=2)
    eco.world.run_while(lambda: eco.reader.busy("session"))
    assert "session" in eco.reader.done and lost["n"] == 1


# -- phase IV --


def test_read_stores_nothing(eco):
    ans = run_online_session(eco, [READ])
    assert ans[0].status == 0 and len(ans[0].data) == 8
    assert eco.records() == []


def test_write_stores_verifiable_record(eco):
    run_online_session(eco, [WRITE])
    (rec,) = eco.records()
    assert len(rec.to_bytes()) == 72
    assert eco.suite.verify_sig(eco.card.keypair.public, signed_message(WRITE, rec.reader_nonce, rec.card_nonce), rec.sig)
    assert (rec.card_id, rec.card_nonce) == (eco.card.id, eco.reader.card_n_c)
    assert eco.implant.therapy == 90


def test_write_under_read_only_card():
    eco = make_eco(card_privilege=Privilege.READ_ONLY)
    with pytest.raises(ProtocolFailure) as exc:
        run_online_session(eco, [WRITE])
    assert exc.value.reason is Reason.PRIVILEGE_VIOLATION
    assert eco.records() == [] and eco.implant.therapy == 70


def test_answer_nonce_advances(eco):
    run_online_session(eco, [READ, READ, WRITE])
    n_i = [x.n_i.value for x in eco.implant.executed]
    assert n_i == [n_i[0], (n_i[0] + 1) % 2**32, (n_i[0] + 2) % 2**32]


def test_finish_closes_session(eco):
    run_online_session(eco, [READ, Command(CommandKind.FINISH)])
    assert eco.implant.session is None
    fails_with(Reason.NO_SESSION, run_main_phase, eco, READ)


def test_bulk_read(eco):
    (ans,) = run_online_session(eco, [Command(CommandKind.READ_STATUS, 1000)])
    assert len(ans.data) == 1000


def test_unsigned_online_command_refused(eco):
    authed(eco)
    run_session_key_establishment(eco)
    with pytest.raises(ProtocolFailure) as exc:
        run_main_phase(eco, WRITE, signed=False)
    assert exc.value.reason is Reason.NR_REQUIRED


# -- remote hospital --


def test_remote_establishment(eco):
    k = run_remote_hospital_establishment(eco)
    assert eco.implant.session.key == k
    assert eco.implant.session.reader_id == eco.remote_reader.id


def test_remote_unknown_implant(eco):
    del eco.manufacturer.registry[eco.implant.id]
    fails_with(Reason.IMPLANT_UNKNOWN, run_remote_hospital_establishment, eco)


def test_remote_server_cannot_mint_m_i(eco):
    # Misbinding: the remote hospital answers with its own (wrong) implant key.
    eco.remote_server.implants[eco.implant.id] = SymmetricKey(bytes(16), KeyRole.PRESHARED_SI)
    mark = len(eco.world.rejections)
    with pytest.raises(ProtocolFailure):
        run_remote_hospital_establishment(eco)
    assert any(r.entity == eco.implant.id and r.reason is Reason.MAC_FAILURE for r in eco.world.rejections[mark:])
    assert eco.implant.session is None


def test_second_implant_unaffected(eco):
    # A sibling implant with its own K_SI stays out of the first implant's session.
    other = Implant(EntityId.from_name("imd-2"), eco.world.rng_for("imd-2"), eco.suite,
                    SymmetricKey(bytes(range(16)), KeyRole.PRESHARED_SI), eco.cost_table)
    eco.world.add(other)
    run_online_session(eco, [READ])
    assert other.session is None and other.executed == []
