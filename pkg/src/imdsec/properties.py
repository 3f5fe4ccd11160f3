"""Randomized Dolev-Yao property harness.

Each trace builds a fresh ecosystem, lets a random active adversary loose on
one protocol phase (the other phases run over a passive network), and then
checks five properties:

a. secrecy: the adversary's closed knowledge holds no session key, PIN,
   command or answer plaintext;
b. agreement: every completion has a matching completion or running record
   at the peer with the same nonces and key, and no completion repeats;
c. replay: re-injecting every delivered frame after the run yields no new
   completion and no new execution;
d. authorization: no executed command exceeds the privilege the server
   granted, and no grant exceeds what the card or mode allows;
e. accountability: every signature record in the implant's flash verifies
   under the key of the card it names.
"""

from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from . import wire
from .entities import Mode, encode_pin
from .flash import audit_dump
from .netsim import (
    DEFAULT_ADVERSARIAL,
    Adversary,
    Channel,
    Deliver,
    LivelockError,
    World,
    adversary_replay,
    random_policy,
)
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
from .types import OFFLINE_PRIVILEGE_CAP, Command, CommandKind, Privilege, ProtocolFailure

PHASES = ("I", "II", "III", "IV")
PHASE_NAMES = {"I": "handshake+card", "II": "user", "III": "session-key", "IV": "main"}
CHECKS = ("secrecy", "agreement", "replay", "authorization", "accountability")
SESSION_MODES = ("online", "remote", "offline", "bedside")

COMMAND_POOL = (
    Command(CommandKind.READ_STATUS, 0),
    Command(CommandKind.READ_STATUS, 40),
    Command(CommandKind.WRITE_THERAPY, 90),
    Command(CommandKind.WRITE_THERAPY, 120),
    Command(CommandKind.SUSPEND, 0),
)
BEDSIDE_PLAN = (Command(CommandKind.READ_STATUS, 0), Command(CommandKind.READ_STATUS, 24))

TRACE_EVENT_BUDGET = 200_000
BASE_POLICY = {"p_drop": 0.05, "p_flip": 0.1, "p_replay": 0.1, "p_duplicate": 0.05, "p_splice": 0.05}
INTENSITIES = (0.15, 0.4, 1.0)
_SECRET_LABELS = {wire.PIN.name: "PIN", wire.CMD.name: "CMD", wire.ANS.name: "ANS", wire.ANS_BULK.name: "ANS"}


@dataclass(frozen=True)
class Violation:
    phase: str
    seed: int
    check: str
    detail: str


@dataclass
class TraceResult:
    phase: str
    seed: int
    mode: str
    reached: str  # last phase that settled, or "" when the first one failed
    completions: int
    executed: int
    violations: list[Violation] = field(default_factory=list)


class _Gate:
    """Switches the random policy on for the targeted phase only."""

    def __init__(self, policy):
        self.policy = policy
        self.active = False

    def __call__(self, adv, world, channel, src, dst, frame):
        if not self.active:
            return Deliver()
        return self.policy(adv, world, channel, src, dst, frame)


def _mode_for(phase: str, rng: random.Random) -> str:
    return rng.choice(SESSION_MODES) if phase in ("III", "IV") else "online"


def _drive(eco: Ecosystem, phase: str, mode: str, gate: _Gate, rng: random.Random, result: "TraceResult") -> None:
    """Run phases in order with the gate open while ``phase`` runs; ``result.reached`` tracks progress."""

    def step(name: str, fn) -> None:
        gate.active = name == phase
        try:
            fn()
        finally:
            gate.active = False
        result.reached = name

    reader = eco.remote_reader if mode == "remote" else eco.reader
    if mode == "bedside":
        step("I", lambda: run_dh_handshake(eco, eco.bedside_reader))
        # The server drives key setup and commands in one run; open the gate for either phase.
        step(phase if phase in ("III", "IV") else "III", lambda: run_bedside_session(eco, list(BEDSIDE_PLAN)))
        return
    step("I", lambda: (run_dh_handshake(eco, reader), run_reader_card_auth(eco, reader)))
    step("II", lambda: run_user_auth(eco, eco.config.pin, reader))
    if mode == "offline":
        step("III", lambda: run_offline_pairing(eco, reader, touch=True, require_card=True))
    else:
        step("III", lambda: run_session_key_establishment(eco, reader))
    commands = rng.sample(COMMAND_POOL, rng.randint(1, 3)) + [Command(CommandKind.FINISH, 0)]
    step("IV", lambda: [run_main_phase(eco, c, reader) for c in commands])


def _honest_keys(world: World, eco: Ecosystem) -> dict[bytes, str]:
    keys = {}
    for rec in (*world.completions, *world.runs):
        label = {"dh": "K_RS", "card": "K'_RC", "session": "K'_RI"}[rec.phase]
        keys[bytes(rec.binding[2])] = label
    keys[eco.implant.k_si.raw] = "K_SI"
    for card in (eco.card, eco.remote_card):
        keys[card.k_sc.raw] = "K_SC"
    return keys


def check_secrecy(adv: Adversary, world: World, eco: Ecosystem) -> list[str]:
    atoms = adv.knowledge.close()
    keys = _honest_keys(world, eco)
    pins = {encode_pin(eco.config.pin)}
    out = []
    for kind, value in atoms:
        if kind == wire.KEY.name and value in keys:
            out.append(f"adversary knows {keys[value]}")
        elif kind == wire.PIN.name and value in pins:
            out.append("adversary knows the PIN")
        elif kind in _SECRET_LABELS and kind != wire.PIN.name:
            out.append(f"adversary knows {_SECRET_LABELS[kind]} plaintext {value.hex()}")
    return out


def check_agreement(world: World) -> list[str]:
    out = []
    seen = set()
    peers = {(r.phase, r.party, r.peer, r.binding) for r in (*world.completions, *world.runs)}
    for c in world.completions:
        key = (c.phase, c.party, c.binding)
        if key in seen:
            out.append(f"{c.party.name} completed {c.phase} twice on one binding")
        seen.add(key)
        if (c.phase, c.peer, c.party, c.binding) not in peers:
            out.append(f"{c.party.name} completed {c.phase} with {c.peer.name} but the peer never agreed")
    return out


def check_replay(world: World, eco: Ecosystem) -> list[str]:
    before_c = len(world.completions)
    before_x = len(eco.implant.executed)
    delivered = [
        replace(e, frame=e.delivered) for e in world.trace if e.delivered is not None and e.channel in world.adversarial
    ]
    adversary_replay(world, delivered, skip_unreachable=True)
    world.run_until_quiescent()
    out = []
    if len(world.completions) > before_c:
        fresh = world.completions[before_c:]
        out.append("replay completed " + ", ".join(f"{c.party.name}:{c.phase}" for c in fresh))
    if len(eco.implant.executed) > before_x:
        fresh_x = eco.implant.executed[before_x:]
        out.append("replay executed " + ", ".join(x.cmd.kind.name for x in fresh_x))
    return out


def check_authorization(eco: Ecosystem) -> list[str]:
    out = []
    cards = {eco.card.id: eco.card.certificate.privilege, eco.remote_card.id: eco.remote_card.certificate.privilege}
    grants = [*eco.server.grants, *eco.remote_server.grants]
    for card_id, _implant, priv in grants:
        cap = cards.get(card_id, Privilege.READ_ONLY)
        if priv > cap:
            out.append(f"server granted {priv.name} above the {cap.name} cap")
    for x in eco.implant.executed:
        if x.cmd.required_privilege > x.privilege:
            out.append(f"{x.cmd.kind.name} ran under {x.privilege.name}")
        if x.mode is Mode.OFFLINE:
            cap = OFFLINE_PRIVILEGE_CAP
        elif x.mode is Mode.BEDSIDE:
            cap = Privilege.READ_ONLY
        else:
            granted = [p for c, i, p in grants if c == x.card_id and i == eco.implant.id]
            cap = max(granted, default=None)
            if cap is None:
                out.append(f"{x.cmd.kind.name} ran without any grant")
                continue
        if x.privilege > cap:
            out.append(f"session privilege {x.privilege.name} exceeds {cap.name}")
    return out


def check_accountability(eco: Ecosystem) -> list[str]:
    out = []
    keys = {c.id: c.keypair.public for c in (eco.card, eco.remote_card)}
    for rec in eco.implant.flash.records():
        pub = keys.get(rec.card_id)
        if pub is None:
            out.append(f"record names unknown card {rec.card_id.name}")
            continue
        entry = audit_dump(rec.to_bytes(), pub, eco.suite, card_id=rec.card_id)[0]
        if not entry.ok:
            out.append(f"record for {rec.cmd.kind.name} fails: {entry.detail}")
    return out


def run_trace(phase: str, seed: int, policy_args: Optional[dict] = None) -> TraceResult:
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    rng = random.Random(f"props:{phase}:{seed}")
    if policy_args is None:
        # Mix gentle and aggressive attackers so later protocol states get exercised too.
        scale = rng.choice(INTENSITIES)
        policy_args = {k: v * scale for k, v in BASE_POLICY.items()}
    gate = _Gate(random_policy(**policy_args))
    adv = Adversary(gate, rng=random.Random(f"adv:{phase}:{seed}"))
    cfg = EcosystemConfig(
        seed=seed, adversarial=DEFAULT_ADVERSARIAL | {Channel.CARD}, event_budget=TRACE_EVENT_BUDGET, keep_trace=True
    )
    eco = build_ecosystem(cfg, adv)
    mode = _mode_for(phase, rng)
    result = TraceResult(phase, seed, mode, "", 0, 0)
    found: list[tuple[str, str]] = []
    try:
        _drive(eco, phase, mode, gate, rng, result)
    except ProtocolFailure:
        pass
    except LivelockError as exc:
        found.append(("replay", f"livelock during the run: {exc}"))
    gate.active = False
    eco.world.run_until_quiescent()
    found += [("secrecy", d) for d in check_secrecy(adv, eco.world, eco)]
    found += [("agreement", d) for d in check_agreement(eco.world)]
    found += [("authorization", d) for d in check_authorization(eco)]
    found += [("accountability", d) for d in check_accountability(eco)]
    result.completions = len(eco.world.completions)
    result.executed = len(eco.implant.executed)
    try:
        found += [("replay", d) for d in check_replay(eco.world, eco)]
    except LivelockError as exc:
        found.append(("replay", f"livelock during replay: {exc}"))
    # Replayed frames must not unlock anything the other checks would flag either.
    found += [("agreement", d) for d in check_agreement(eco.world) if ("agreement", d) not in found]
    found += [("authorization", d) for d in check_authorization(eco) if ("authorization", d) not in found]
    result.violations = [Violation(phase, seed, c, d) for c, d in found]
    return result


@dataclass
class PhaseReport:
    phase: str
    traces: int
    reached: dict[str, int]
    modes: dict[str, int]
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_check(self) -> dict[str, int]:
        counts = dict.fromkeys(CHECKS, 0)
        for v in self.violations:
            counts[v.check] += 1
        return counts


def _trace_job(args: tuple[str, int]) -> TraceResult:
    return run_trace(*args)


def run_phase(phase: str, traces: int = 1000, first_seed: int = 0, workers: Optional[int] = None) -> PhaseReport:
    jobs = [(phase, s) for s in range(first_seed, first_seed + traces)]
    if workers == 1:
        results = [_trace_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trace_job, jobs, chunksize=max(1, traces // 64)))
    return summarize(phase, results)


def summarize(phase: str, results: Iterable[TraceResult]) -> PhaseReport:
    reached: dict[str, int] = {}
    modes: dict[str, int] = {}
    violations: list[Violation] = []
    n = 0
    for r in results:
        n += 1
        reached[r.reached or "-"] = reached.get(r.reached or "-", 0) + 1
        modes[r.mode] = modes.get(r.mode, 0) + 1
        violations += r.violations
    return PhaseReport(phase, n, reached, modes, violations)


def run_suite(traces: int = 1000, phases: Sequence[str] = PHASES, workers: Optional[int] = None) -> list[PhaseReport]:
    return [run_phase(p, traces, workers=workers) for p in phases]
