"""Deterministic discrete-event network with a Dolev-Yao adversary hook.

Every frame on an adversarial channel is offered to the adversary exactly once
before delivery. The OOB channel models physical contact and is never offered
to, or writable by, the adversary.
"""

from __future__ import annotations

import enum
import heapq
import random
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Iterable, Optional, Sequence, Union

from . import wire
from .crypto import AuthenticationError, CryptoSuite
from .types import EntityId, Reason

if TYPE_CHECKING:
    from .entities import Entity


class Channel(str, enum.Enum):
    RF = "rf"
    OOB = "oob"
    INTERNET = "internet"
    CARD = "card"


LATENCY_MS = {Channel.RF: 2, Channel.OOB: 5, Channel.INTERNET: 20, Channel.CARD: 1}
DEFAULT_ADVERSARIAL = frozenset({Channel.RF, Channel.INTERNET})
PHASE_TIMEOUT_MS = 5_000
DEFAULT_EVENT_BUDGET = 2_000_000
HOUR_MS = 3_600_000


class ChannelViolation(Exception):
    """Attempt to put an adversary-originated frame on a channel that forbids it."""


class LivelockError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChannelEvent:
    seq: int
    time_ms: int
    channel: Channel
    src: EntityId
    dst: EntityId
    action: str  # deliver | drop | modify | inject | replay-of(N)
    frame: bytes
    delivered_as: Optional[bytes] = None

    @property
    def delivered(self) -> Optional[bytes]:
        if self.action == "drop":
            return None
        return self.frame if self.delivered_as is None else self.delivered_as

    def line(self) -> str:
        hexed = self.frame.hex() if self.delivered_as is None else f"{self.frame.hex()}>{self.delivered_as.hex()}"
        return f"{self.seq}\t{self.time_ms}\t{self.channel.value}\t{self.src.name}\t{self.dst.name}\t{self.action}\t{hexed}"


@dataclass(frozen=True)
class Rejection:
    time_ms: int
    entity: EntityId
    reason: Reason
    detail: str = ""


@dataclass(frozen=True)
class Completion:
    """A party finished a phase; ``binding`` holds the nonces and key it agreed on."""

    phase: str
    party: EntityId
    peer: EntityId
    binding: tuple


# -- adversary verdicts --------------------------------------------------------


@dataclass(frozen=True)
class Deliver:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Modify:
    frame: bytes


Verdict = Union[Deliver, Drop, Modify]


# -- the world ---------------------------------------------------------------------


@dataclass(order=True)
class _Scheduled:
    time_ms: int
    order: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False)


class World:
    def __init__(
        self,
        seed: int = 0,
        adversary: Optional["Adversary"] = None,
        adversarial: Iterable[Channel] = DEFAULT_ADVERSARIAL,
        event_budget: int = DEFAULT_EVENT_BUDGET,
        epoch_ms: int = 9 * HOUR_MS,
        suite: CryptoSuite = CryptoSuite(),
        keep_trace: bool = True,
    ):
        self.seed = seed
        self.adversary = adversary
        self.adversarial = frozenset(adversarial)
        if Channel.OOB in self.adversarial:
            raise ChannelViolation("the OOB channel cannot be adversarial")
        self.event_budget = event_budget
        self.epoch_ms = epoch_ms
        self.suite = suite
        self.keep_trace = keep_trace
        self.now_ms = 0
        self.entities: dict[EntityId, "Entity"] = {}
        self.trace: list[ChannelEvent] = []
        self.rejections: list[Rejection] = []
        self.completions: list[Completion] = []
        self.runs: list[Completion] = []
        self.card_slots: dict[EntityId, EntityId] = {}
        self._queue: list[_Scheduled] = []
        self._order = 0
        self._seq = 0
        self._timer_tokens = 0
        self._cancelled: set[int] = set()
        self.events_processed = 0

    # -- setup --

    def rng_for(self, label: str) -> random.Random:
        return random.Random(f"{self.seed}:{label}")

    def add(self, entity: "Entity") -> "Entity":
        if entity.id in self.entities:
            raise ValueError(f"duplicate entity {entity.id!r}")
        self.entities[entity.id] = entity
        entity.world = self
        return entity

    def wall_clock_ms(self) -> int:
        return self.epoch_ms + self.now_ms

    # -- card interface (physical contact, no radio) --

    def insert_card(self, reader: EntityId, card: EntityId) -> None:
        self.card_slots[reader] = card

    def remove_card(self, reader: EntityId) -> None:
        card = self.card_slots.pop(reader, None)
        if card is not None and card in self.entities:
            self.entities[card].power_down()

    # -- sending --

    def _push(self, delay_ms: int, kind: str, payload: Any) -> None:
        self._order += 1
        heapq.heappush(self._queue, _Scheduled(self.now_ms + delay_ms, self._order, kind, payload))

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _record(self, event: ChannelEvent) -> None:
        if self.keep_trace:
            self.trace.append(event)
        if self.adversary is not None and event.channel in self.adversarial:
            self.adversary.observe(event)

    def send(self, channel: Channel, src: EntityId, dst: EntityId, msg: Union[wire.Message, bytes]) -> ChannelEvent:
        frame = msg if isinstance(msg, (bytes, bytearray)) else wire.encode_frame(msg)
        frame = bytes(frame)
        verdict: Verdict = Deliver()
        if self.adversary is not None and channel in self.adversarial:
            verdict = self.adversary.intercept(self, channel, src, dst, frame)
        if isinstance(verdict, Drop):
            event = ChannelEvent(self._next_seq(), self.now_ms, channel, src, dst, "drop", frame)
        elif isinstance(verdict, Modify) and verdict.frame != frame:
            event = ChannelEvent(self._next_seq(), self.now_ms, channel, src, dst, "modify", frame, bytes(verdict.frame))
        else:
            event = ChannelEvent(self._next_seq(), self.now_ms, channel, src, dst, "deliver", frame)
        self._record(event)
        if event.delivered is not None:
            self._push(LATENCY_MS[channel], "deliver", event)
        return event

    def inject(
        self, channel: Channel, src: EntityId, dst: EntityId, frame: bytes, replay_of: Optional[int] = None, delay_ms: int = 0
    ) -> ChannelEvent:
        """Adversary-originated frame. Never allowed on OOB."""
        if channel is Channel.OOB or channel not in self.adversarial:
            raise ChannelViolation(f"adversary cannot write to the {channel.value} channel")
        action = "inject" if replay_of is None else f"replay-of({replay_of})"
        event = ChannelEvent(self._next_seq(), self.now_ms, channel, src, dst, action, bytes(frame))
        if self.keep_trace:
            self.trace.append(event)
        self._push(LATENCY_MS[channel] + delay_ms, "deliver", event)
        return event

    # -- timers --

    def set_timer(self, owner: EntityId, delay_ms: int, name: str) -> int:
        self._timer_tokens += 1
        self._push(delay_ms, "timer", (owner, name, self._timer_tokens))
        return self._timer_tokens

    def cancel_timer(self, token: int) -> None:
        """A cancelled timer is discarded without advancing the clock."""
        self._cancelled.add(token)

    def call_at(self, delay_ms: int, fn: Callable[[], None]) -> None:
        """Schedule an external action (a user pressing a button, a touch, a flood burst)."""
        self._push(delay_ms, "call", fn)

    # -- bookkeeping hooks for entities --

    def reject(self, entity: EntityId, reason: Reason, detail: str = "") -> None:
        self.rejections.append(Rejection(self.now_ms, entity, Reason(reason), detail))

    def complete(self, phase: str, party: EntityId, peer: EntityId, binding: tuple) -> None:
        self.completions.append(Completion(phase, party, peer, binding))

    def running(self, phase: str, party: EntityId, peer: EntityId, binding: tuple) -> None:
        """A party sent its last message of a phase and is committed to ``binding``.

        The peer may complete before this party hears back, so agreement checks
        accept a running record in place of a completion.
        """
        self.runs.append(Completion(phase, party, peer, binding))

    # -- running --

    def _discard_cancelled(self) -> None:
        while self._queue and self._queue[0].kind == "timer" and self._queue[0].payload[2] in self._cancelled:
            self._cancelled.discard(heapq.heappop(self._queue).payload[2])

    def step(self) -> bool:
        self._discard_cancelled()
        if not self._queue:
            return False
        item = heapq.heappop(self._queue)
        self.now_ms = max(self.now_ms, item.time_ms)
        self.events_processed += 1
        if self.events_processed > self.event_budget:
            raise LivelockError(f"event budget of {self.event_budget} exhausted")
        if item.kind == "deliver":
            event: ChannelEvent = item.payload
            target = self.entities.get(event.dst)
            if target is not None:
                target.receive(event.channel, event.src, event.delivered)
        elif item.kind == "timer":
            owner, name, token = item.payload
            target = self.entities.get(owner)
            if target is not None:
                target.on_timer(name, token)
        else:
            item.payload()
        return True

    def run_until_quiescent(self) -> list[ChannelEvent]:
        while self.step():
            pass
        return self.trace

    def run_while(self, busy: Callable[[], bool]) -> None:
        """Step until ``busy()`` turns false or nothing is scheduled."""
        while busy() and self.step():
            pass

    def run_until(self, time_ms: int) -> None:
        self._discard_cancelled()
        while self._queue and self._queue[0].time_ms <= time_ms:
            self.step()
            self._discard_cancelled()
        self.now_ms = max(self.now_ms, time_ms)

    def advance(self, delta_ms: int) -> None:
        """Let virtual time pass with nothing on the air."""
        self.run_until(self.now_ms + delta_ms)

    def export_trace(self) -> str:
        return "".join(e.line() + "\n" for e in self.trace)


def schedule(world: World, delay_ms: int, fn: Callable[[], None]) -> None:
    world.call_at(delay_ms, fn)


def run_until_quiescent(world: World) -> list[ChannelEvent]:
    return world.run_until_quiescent()


# -- symbolic knowledge ------------------------------------------------------------


Atom = tuple[str, bytes]


@dataclass
class Knowledge:
    """Terms the adversary holds, closed under decryption with known keys.

    Atoms are (kind, bytes) pairs taken from decoded frame fields. Ciphertexts
    stay opaque until a key that opens them is itself in the set.
    """

    suite: CryptoSuite = CryptoSuite()
    atoms: set = field(default_factory=set)
    blobs: dict = field(default_factory=dict)  # (ad, ciphertext) -> payload class or None
    opened: set = field(default_factory=set)
    given_keys: set = field(default_factory=set)
    frames: list = field(default_factory=list)

    @property
    def keys(self) -> set[bytes]:
        return {v for k, v in self.atoms if k == "key"} | self.given_keys

    def give_key(self, key: bytes) -> None:
        self.given_keys.add(bytes(key))
        self.atoms.add(("key", bytes(key)))

    def learn_frame(self, frame: bytes) -> None:
        self.frames.append(frame)
        _learn_frame(frame, self.atoms, self.blobs)

    def close(self) -> set[Atom]:
        """Worklist closure: retry only blobs that have not been opened."""
        tried: set = set()
        while True:
            keys = self.keys
            progress = False
            for blob_key, payload in list(self.blobs.items()):
                if blob_key in self.opened:
                    continue
                for key in keys:
                    if (blob_key, key) in tried:
                        continue
                    tried.add((blob_key, key))
                    plain = _try_open(self.suite, key, blob_key)
                    if plain is not None:
                        self.opened.add(blob_key)
                        _learn_plain(plain, payload, self.atoms, self.blobs)
                        progress = True
                        break
            if not progress:
                return self.atoms

    def brute_force_closure(self) -> set[Atom]:
        """Recompute the closure from scratch by trying every key on every blob until nothing changes."""
        atoms: set = {("key", k) for k in self.given_keys}
        blobs: dict = {}
        for f in self.frames:
            _learn_frame(f, atoms, blobs)
        opened: set = set()
        changed = True
        while changed:
            changed = False
            keys = {v for k, v in atoms if k == "key"}
            for blob_key, payload in list(blobs.items()):
                for key in keys:
                    plain = _try_open(self.suite, key, blob_key)
                    if plain is not None and blob_key not in opened:
                        opened.add(blob_key)
                        _learn_plain(plain, payload, atoms, blobs)
                        changed = True
        return atoms

    def knows(self, kind: str, value: bytes) -> bool:
        return (kind, bytes(value)) in self.atoms

    def secret_atoms(self) -> set[Atom]:
        secret = {k.name for k in _SECRET_KINDS}
        return {a for a in self.atoms if a[0] in secret}


_SECRET_KINDS = (wire.KEY, wire.PIN, wire.ANS, wire.ANS_BULK, wire.CMD)


def _try_open(suite: CryptoSuite, key: bytes, blob_key: tuple[bytes, bytes]) -> Optional[bytes]:
    ad, blob = blob_key
    try:
        return suite.aead_decrypt(key, blob, ad)
    except (AuthenticationError, ValueError):
        return None


def _learn_fields(obj: wire.Payload, atoms: set, blobs: dict) -> None:
    for _, kind, value in obj.items():
        if isinstance(kind, wire.Blob):
            blobs.setdefault((kind.ad, bytes(value)), kind.payload)
        else:
            atoms.add((kind.name, kind.pack(value)))


def _learn_frame(frame: bytes, atoms: set, blobs: dict) -> None:
    try:
        msg = wire.decode_frame(frame)
    except wire.DecodeError:
        atoms.add(("raw", bytes(frame)))
        return
    _learn_fields(msg, atoms, blobs)


def _learn_plain(plain: bytes, payload: Optional[type], atoms: set, blobs: dict) -> None:
    if payload is None:
        _learn_frame(plain, atoms, blobs)
        return
    try:
        obj = payload.unpack(plain)
    except (wire.DecodeError, ValueError):
        atoms.add(("raw", plain))
        return
    _learn_fields(obj, atoms, blobs)


# -- adversary -------------------------------------------------------------------------


Policy = Callable[["Adversary", World, Channel, EntityId, EntityId, bytes], Verdict]


def passive(adv: "Adversary", world: World, channel: Channel, src: EntityId, dst: EntityId, frame: bytes) -> Verdict:
    return Deliver()


def drop_all(channels: Iterable[Channel] = (Channel.RF,)) -> Policy:
    blocked = frozenset(channels)

    def policy(adv, world, channel, src, dst, frame):
        return Drop() if channel in blocked else Deliver()

    return policy


@dataclass(frozen=True)
class Rule:
    """Trigger on (channel, message tag); act with drop, flip, replay, duplicate or deliver."""

    action: str
    channel: Optional[Channel] = None
    tag: Optional[int] = None
    probability: float = 1.0

    def matches(self, channel: Channel, frame: bytes) -> bool:
        if self.channel is not None and channel is not self.channel:
            return False
        return self.tag is None or (len(frame) > 0 and frame[0] == self.tag)


def rule_policy(rules: Sequence[Rule]) -> Policy:
    """First matching rule whose probability fires decides the frame's fate."""

    def policy(adv, world, channel, src, dst, frame):
        for rule in rules:
            if not rule.matches(channel, frame) or adv.rng.random() >= rule.probability:
                continue
            return adv.act(rule.action, world, channel, src, dst, frame)
        return Deliver()

    return policy


def random_policy(p_drop=0.05, p_flip=0.1, p_replay=0.1, p_duplicate=0.05, p_splice=0.05) -> Policy:
    """Randomized active attacker used by the property suite."""
    weights = [("drop", p_drop), ("flip", p_flip), ("replay", p_replay), ("duplicate", p_duplicate), ("splice", p_splice)]

    def policy(adv, world, channel, src, dst, frame):
        r = adv.rng.random()
        acc = 0.0
        for action, p in weights:
            acc += p
            if r < acc:
                return adv.act(action, world, channel, src, dst, frame)
        return Deliver()

    return policy


class Adversary:
    def __init__(self, policy: Policy = passive, rng: Optional[random.Random] = None, suite: CryptoSuite = CryptoSuite()):
        self.policy = policy
        self.rng = rng or random.Random(0)
        self.knowledge = Knowledge(suite)
        self.observed: list[ChannelEvent] = []
        self.offered: list[tuple[Channel, bytes]] = []

    def observe(self, event: ChannelEvent) -> None:
        self.observed.append(event)
        self.knowledge.learn_frame(event.frame)

    def intercept(self, world: World, channel: Channel, src: EntityId, dst: EntityId, frame: bytes) -> Verdict:
        self.offered.append((channel, frame))
        return self.policy(self, world, channel, src, dst, frame)

    def act(self, action: str, world: World, channel: Channel, src: EntityId, dst: EntityId, frame: bytes) -> Verdict:
        if action == "drop":
            return Drop()
        if action == "flip":
            return Modify(flip_bit(frame, self.rng))
        if action == "duplicate":
            world.inject(channel, src, dst, frame, delay_ms=1)
            return Deliver()
        if action in ("replay", "splice"):
            older = [e for e in self.observed if e.channel is channel and e.frame != frame]
            if action == "splice":
                # Substitute an older frame of the same message type.
                older = [e for e in older if e.frame[:1] == frame[:1]]
            if older:
                old = self.rng.choice(older)
                world.inject(channel, old.src, dst, old.frame, replay_of=old.seq, delay_ms=1)
                if action == "splice":
                    return Drop()
            return Deliver()
        return Deliver()


def flip_bit(frame: bytes, rng: random.Random) -> bytes:
    if not frame:
        return frame
    data = bytearray(frame)
    i = rng.randrange(len(data) * 8)
    data[i // 8] ^= 0x80 >> (i % 8)
    return bytes(data)


def adversary_replay(
    world: World, trace: Sequence[ChannelEvent], seq_range: Optional[range] = None, skip_unreachable: bool = False
) -> list[ChannelEvent]:
    """Re-inject recorded frames verbatim, in order, under fresh sequence numbers.

    Frames from channels the adversary cannot write raise, unless
    ``skip_unreachable`` drops them from the replay instead.
    """
    chosen = [e for e in trace if seq_range is None or e.seq in seq_range]
    if skip_unreachable:
        chosen = [e for e in chosen if e.channel in world.adversarial]
    for e in chosen:
        if e.channel not in world.adversarial:
            raise ChannelViolation(f"{e.channel.value} frames cannot be replayed")
    out = []
    for i, e in enumerate(chosen):
        out.append(world.inject(e.channel, e.src, e.dst, e.frame, replay_of=e.seq, delay_ms=i))
    return out
