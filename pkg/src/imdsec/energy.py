"""Implant-side energy and delay accounting.

The cost table prices each implant protocol step per security class. Radio
energy follows airtime at the transceiver's effective rate; crypto energy
follows the number of cipher blocks a step touches. Per-step values are not
published individually, so :func:`calibrate` fits them to the published
aggregates (session energy, authentication energy, delay and daily energy)
and the result ships as ``data/cost_table.json``.
"""

from __future__ import annotations

import enum
import json
import math
import os
import statistics
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from . import wire
from .crypto import AEAD_OVERHEAD, blocks
from .types import ANS_BYTES

COST_TABLE_ENV = "IMDSEC_COST_TABLE"
SIGNATURE_RECORD_BYTES = 72


class SecurityClass(str, enum.Enum):
    NONE = "none"
    HW_AES = "hw-aes"
    SW_AES = "sw-aes"
    SW_SPECK = "sw-speck"
    SW_MISTY1 = "sw-misty1"


SECURE_CLASSES = (SecurityClass.HW_AES, SecurityClass.SW_AES, SecurityClass.SW_SPECK, SecurityClass.SW_MISTY1)


class UnknownStep(KeyError):
    pass


# -- step structure --------------------------------------------------------------


@dataclass(frozen=True)
class StepProfile:
    """Work one implant step performs: bytes on air, cipher blocks, flash bytes."""

    name: str
    rx_bytes: int = 0
    tx_bytes: int = 0
    blocks: int = 0
    flash_bytes: int = 0
    auth: bool = False

    @property
    def air_bytes(self) -> int:
        return self.rx_bytes + self.tx_bytes

    @property
    def packets(self) -> int:
        return int(self.rx_bytes > 0) + int(self.tx_bytes > 0)


def _cmac_blocks(nbytes: int) -> int:
    return max(1, blocks(nbytes))


def _aead_blocks(payload_cls: type, plaintext_bytes: Optional[int] = None) -> int:
    """Blocks for one EtM open/seal: CTR over the plaintext plus CMAC over ad||iv||ct."""
    n = payload_cls.fixed_size() if plaintext_bytes is None else plaintext_bytes
    ad = len(payload_cls.__name__)
    return blocks(n) + _cmac_blocks(2 + ad + 8 + n)


def _frame_bytes(msg_cls: type, var_bytes: int = 0) -> int:
    body = 0
    for _, kind in msg_cls.wire_fields():
        body += kind.size if kind.size is not None else 2 + var_bytes
    return wire.HEADER_BYTES + body


def secure_steps() -> tuple[StepProfile, ...]:
    """Implant steps of one basic secure session (key establishment + one command)."""
    subkeys = 2  # EtM subkeys of the fresh K'_RI; K_SI subkeys are precomputed
    return (
        StepProfile("rx_reader_hello", rx_bytes=_frame_bytes(wire.SkHello), auth=True),
        StepProfile("tx_implant_hello", tx_bytes=_frame_bytes(wire.SkImplantHello), blocks=1, auth=True),
        StepProfile(
            "rx_key_material",
            rx_bytes=_frame_bytes(wire.SkKey),
            blocks=subkeys + _aead_blocks(wire.MI) + _aead_blocks(wire.MRI),
            auth=True,
        ),
        StepProfile("tx_key_confirm", tx_bytes=_frame_bytes(wire.SkConfirm), blocks=_cmac_blocks(1 + 8), auth=True),
        StepProfile("rx_command", rx_bytes=_frame_bytes(wire.CommandSigned), blocks=_aead_blocks(wire.SignedCmdBlock)),
        StepProfile("store_signature", flash_bytes=SIGNATURE_RECORD_BYTES),
        StepProfile("tx_answer", tx_bytes=_frame_bytes(wire.Answer), blocks=_aead_blocks(wire.AnsBlock)),
    )


def plain_steps() -> tuple[StepProfile, ...]:
    """The unsecured reference exchange: one command in, one answer out."""
    return (
        StepProfile("rx_plain_command", rx_bytes=_frame_bytes(wire.PlainCommand)),
        StepProfile("tx_plain_answer", tx_bytes=_frame_bytes(wire.PlainAnswer)),
    )


def bulk_chunks(nbytes: int, chunk_bytes: int) -> list[int]:
    if nbytes <= 0:
        return []
    full, rest = divmod(nbytes, chunk_bytes)
    return [chunk_bytes] * full + ([rest] if rest else [])


def chunk_profile(security: SecurityClass, data_bytes: int) -> StepProfile:
    if security is SecurityClass.NONE:
        return StepProfile("bulk_chunk", tx_bytes=_frame_bytes(wire.PlainChunk, data_bytes))
    plaintext = 4 + 4 + 4 + 4 + 2 + data_bytes
    return StepProfile(
        "bulk_chunk",
        tx_bytes=_frame_bytes(wire.AnswerChunk, plaintext + AEAD_OVERHEAD),
        blocks=_aead_blocks(wire.ChunkBlock, plaintext),
    )


# -- published anchors -----------------------------------------------------------


@dataclass(frozen=True)
class Anchors:
    """Published aggregates the calibration must reproduce."""

    rate_bps: float = 265_000.0
    session_uj: Mapping[str, float] = field(
        default_factory=lambda: {"none": 16.61, "hw-aes": 108.31, "sw-aes": 217.89}
    )
    auth_uj: Mapping[str, float] = field(default_factory=lambda: {"hw-aes": 59.6, "sw-aes": 119.4})
    delay_ms: Mapping[str, float] = field(default_factory=lambda: {"none": 2.17, "hw-aes": 15.73, "sw-aes": 58.99})
    daily_j: Mapping[str, float] = field(default_factory=lambda: {"none": 16.60, "hw-aes": 17.69, "sw-aes": 19.89})
    daily_ans_bytes: int = 3_000_000
    heartbeat_uj: float = 20.0
    heart_rate_bpm: float = 60.0
    duty_cycle: float = 0.05
    # Nominal priors; they only shape how an aggregate is split across steps.
    mcu_power_mw: float = 3.3 * 1.2
    flash_uj_per_byte: float = 0.15
    flash_ms_per_byte: float = 0.005
    # Crypto cost of the lightweight software ciphers relative to software AES.
    crypto_ratio: Mapping[str, float] = field(default_factory=lambda: {"sw-speck": 0.40, "sw-misty1": 0.75})


# -- cost table --------------------------------------------------------------------


@dataclass(frozen=True)
class StepCost:
    energy_uj: float
    time_ms: float


@dataclass(frozen=True)
class ClassCosts:
    steps: Mapping[str, StepCost]
    block_ms: float
    bulk_block_uj: float


@dataclass(frozen=True)
class CostTable:
    rate_bps: float
    radio_power_mw: float
    packet_overhead_ms: float
    chunk_bytes: int
    medical_baseline_j: float
    heartbeat_uj: float
    heart_rate_bpm: float
    duty_cycle: float
    daily_ans_bytes: int
    classes: Mapping[str, ClassCosts]

    def costs(self, security: SecurityClass) -> ClassCosts:
        return self.classes[SecurityClass(security).value]

    def step(self, security: SecurityClass, name: str) -> StepCost:
        try:
            return self.costs(security).steps[name]
        except KeyError:
            raise UnknownStep(f"{name!r} is not a step of class {SecurityClass(security).value}") from None

    def airtime_ms(self, profile: StepProfile) -> float:
        return profile.packets * self.packet_overhead_ms + profile.air_bytes * 8 / self.rate_bps * 1e3

    def chunk_cost(self, security: SecurityClass, data_bytes: int) -> StepCost:
        prof = chunk_profile(security, data_bytes)
        air = self.airtime_ms(prof)
        c = self.costs(security)
        return StepCost(self.radio_power_mw * air + c.bulk_block_uj * prof.blocks, air + c.block_ms * prof.blocks)

    def bulk_cost(self, security: SecurityClass, nbytes: int) -> StepCost:
        e = t = 0.0
        sizes = bulk_chunks(nbytes, self.chunk_bytes)
        # All full chunks cost the same; price one and multiply.
        if sizes:
            full = self.chunk_cost(security, self.chunk_bytes)
            nfull = sizes.count(self.chunk_bytes)
            e, t = full.energy_uj * nfull, full.time_ms * nfull
            if sizes[-1] != self.chunk_bytes:
                last = self.chunk_cost(security, sizes[-1])
                e, t = e + last.energy_uj, t + last.time_ms
        return StepCost(e, t)

    # -- serialization --

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = {
            k: {"steps": {s: asdict(c) for s, c in v.steps.items()}, "block_ms": v.block_ms, "bulk_block_uj": v.bulk_block_uj}
            for k, v in self.classes.items()
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostTable":
        classes = {
            k: ClassCosts(
                steps={s: StepCost(float(c["energy_uj"]), float(c["time_ms"])) for s, c in v["steps"].items()},
                block_ms=float(v["block_ms"]),
                bulk_block_uj=float(v["bulk_block_uj"]),
            )
            for k, v in d["classes"].items()
        }
        missing = {c.value for c in SecurityClass} - set(classes)
        if missing:
            raise ValueError(f"cost table lacks classes: {sorted(missing)}")
        scalars = {k: d[k] for k in cls.__dataclass_fields__ if k != "classes"}
        return cls(classes=classes, **scalars)

    def dump(self, path: os.PathLike | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: os.PathLike | str) -> "CostTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_cost_table() -> CostTable:
    """Shipped table, or the file named by ``$IMDSEC_COST_TABLE``."""
    override = os.environ.get(COST_TABLE_ENV)
    if override:
        return CostTable.load(override)
    text = resources.files("imdsec").joinpath("data/cost_table.json").read_text()
    return CostTable.from_dict(json.loads(text))


# -- calibration -----------------------------------------------------------------------


def constrained_lstsq(prior: np.ndarray, weights: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """argmin_x sum(w * (x - prior)**2) subject to A @ x == b, via the KKT system."""
    n, m = len(prior), len(b)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2 * np.diag(weights)
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    rhs = np.concatenate([2 * weights * prior, b])
    return np.linalg.solve(kkt, rhs)[:n]


def _fit_steps(prior: np.ndarray, auth_mask: np.ndarray, auth_total: float, session_total: float) -> np.ndarray:
    # Weights 1/prior make the correction proportional to each step's prior.
    A = np.vstack([auth_mask.astype(float), np.ones_like(prior)])
    return constrained_lstsq(prior, 1.0 / prior, A, np.array([auth_total, session_total]))


def calibrate(anchors: Anchors = Anchors(), chunk_bytes: int = wire.DEFAULT_CHUNK_BYTES) -> CostTable:
    plain = plain_steps()
    steps = secure_steps()
    bits_ms = 8 / anchors.rate_bps * 1e3

    # Radio: the unsecured exchange is pure airtime.
    plain_bytes = sum(p.air_bytes for p in plain)
    plain_packets = sum(p.packets for p in plain)
    overhead_ms = (anchors.delay_ms["none"] - plain_bytes * bits_ms) / plain_packets
    radio_mw = anchors.session_uj["none"] / anchors.delay_ms["none"]
    partial = CostTable(
        rate_bps=anchors.rate_bps,
        radio_power_mw=radio_mw,
        packet_overhead_ms=overhead_ms,
        chunk_bytes=chunk_bytes,
        medical_baseline_j=0.0,
        heartbeat_uj=anchors.heartbeat_uj,
        heart_rate_bpm=anchors.heart_rate_bpm,
        duty_cycle=anchors.duty_cycle,
        daily_ans_bytes=anchors.daily_ans_bytes,
        classes={},
    )
    air = np.array([partial.airtime_ms(p) for p in steps])
    nblocks = np.array([p.blocks for p in steps], dtype=float)
    flash = np.array([p.flash_bytes for p in steps], dtype=float)
    auth_mask = np.array([p.auth for p in steps])

    classes: dict[str, ClassCosts] = {
        "none": ClassCosts(
            steps={p.name: StepCost(radio_mw * partial.airtime_ms(p), partial.airtime_ms(p)) for p in plain},
            block_ms=0.0,
            bulk_block_uj=0.0,
        )
    }
    crypto_share: dict[str, np.ndarray] = {}
    for name in ("hw-aes", "sw-aes"):
        fixed_ms = air + flash * anchors.flash_ms_per_byte
        block_ms = (anchors.delay_ms[name] - fixed_ms.sum()) / nblocks.sum()
        if block_ms <= 0:
            raise ValueError(f"{name}: airtime alone exceeds the published delay")
        times = fixed_ms + block_ms * nblocks
        crypto_prior = anchors.mcu_power_mw * block_ms * nblocks
        prior = radio_mw * air + crypto_prior + anchors.flash_uj_per_byte * flash
        energies = _fit_steps(prior, auth_mask, anchors.auth_uj[name], anchors.session_uj[name])
        if (energies <= 0).any():
            raise ValueError(f"{name}: calibration produced a non-positive step energy")
        crypto_share[name] = crypto_prior / prior
        classes[name] = ClassCosts(
            steps={p.name: StepCost(float(e), float(t)) for p, e, t in zip(steps, energies, times)},
            block_ms=float(block_ms),
            bulk_block_uj=0.0,
        )

    # Lightweight software ciphers: software-AES structure, crypto part scaled.
    sw = classes["sw-aes"]
    for name, ratio in anchors.crypto_ratio.items():
        scaled = {}
        for i, p in enumerate(steps):
            base = sw.steps[p.name]
            crypto_e = base.energy_uj * crypto_share["sw-aes"][i]
            crypto_t = sw.block_ms * p.blocks
            scaled[p.name] = StepCost(
                base.energy_uj - crypto_e * (1 - ratio), base.time_ms - crypto_t * (1 - ratio)
            )
        classes[name] = ClassCosts(steps=scaled, block_ms=sw.block_ms * ratio, bulk_block_uj=0.0)

    table = _replace_classes(partial, classes)

    # Daily cycle: baseline is whatever the unsecured day leaves after stimulation and the session.
    stim_j = anchors.heartbeat_uj * anchors.heart_rate_bpm * 60 * 24 / 1e6
    spec_none = SessionSpec.for_volume(SecurityClass.NONE, anchors.daily_ans_bytes)
    baseline = anchors.daily_j["none"] - stim_j - session_energy(table, SecurityClass.NONE, spec_none) / 1e6

    # Bulk crypto energy per block, solved so each secure class meets its daily figure.
    for name in ("hw-aes", "sw-aes"):
        security = SecurityClass(name)
        spec = SessionSpec.for_volume(security, anchors.daily_ans_bytes)
        without_bulk_crypto = session_energy(table, security, spec)
        total_blocks = sum(chunk_profile(security, c).blocks for c in bulk_chunks(_extra(spec), chunk_bytes))
        target_uj = (anchors.daily_j[name] - stim_j - baseline) * 1e6
        per_block = (target_uj - without_bulk_crypto) / total_blocks
        if per_block <= 0:
            raise ValueError(f"{name}: daily anchor below the radio cost of the bulk session")
        c = classes[name]
        classes[name] = ClassCosts(c.steps, c.block_ms, float(per_block))
    for name, ratio in anchors.crypto_ratio.items():
        c = classes[name]
        classes[name] = ClassCosts(c.steps, c.block_ms, classes["sw-aes"].bulk_block_uj * ratio)

    table = _replace_classes(table, classes)
    return CostTable(**{**_scalars(table), "medical_baseline_j": float(baseline), "classes": table.classes})


def _scalars(t: CostTable) -> dict:
    return {k: getattr(t, k) for k in t.__dataclass_fields__ if k != "classes"}


def _replace_classes(t: CostTable, classes: Mapping[str, ClassCosts]) -> CostTable:
    return CostTable(**{**_scalars(t), "classes": dict(classes)})


def _extra(spec: "SessionSpec") -> int:
    return sum(spec.bulk_bytes)


# -- session specs and aggregates ----------------------------------------------------


@dataclass(frozen=True)
class SessionSpec:
    """Executed implant steps plus any bulk answer transfers, in bytes."""

    steps: tuple[str, ...] = ()
    bulk_bytes: tuple[int, ...] = ()

    def __add__(self, other: "SessionSpec") -> "SessionSpec":
        return SessionSpec(self.steps + other.steps, self.bulk_bytes + other.bulk_bytes)

    @classmethod
    def basic(cls, security: SecurityClass) -> "SessionSpec":
        names = plain_steps() if SecurityClass(security) is SecurityClass.NONE else secure_steps()
        return cls(tuple(p.name for p in names))

    @classmethod
    def for_volume(cls, security: SecurityClass, ans_bytes: int) -> "SessionSpec":
        """Basic session whose answer carries ``ans_bytes`` instead of 8 bytes."""
        base = cls.basic(security)
        extra = max(0, ans_bytes - ANS_BYTES)
        return base if extra == 0 else base + cls(bulk_bytes=(extra,))

    @classmethod
    def auth_only(cls) -> "SessionSpec":
        return cls(tuple(p.name for p in secure_steps() if p.auth))


def session_energy(table: CostTable, security: SecurityClass, spec: SessionSpec) -> float:
    """Energy in µJ of the executed steps and bulk transfers."""
    return math.fsum(
        [table.step(security, s).energy_uj for s in spec.steps]
        + [table.bulk_cost(security, b).energy_uj for b in spec.bulk_bytes]
    )


def session_time(table: CostTable, security: SecurityClass, spec: SessionSpec) -> float:
    return math.fsum(
        [table.step(security, s).time_ms for s in spec.steps]
        + [table.bulk_cost(security, b).time_ms for b in spec.bulk_bytes]
    )


def auth_energy(table: CostTable, security: SecurityClass) -> float:
    """E_auth: implant steps run before the reader is authenticated (µJ)."""
    if SecurityClass(security) is SecurityClass.NONE:
        return 0.0
    return session_energy(table, security, SessionSpec.auth_only())


def protocol_delay(table: CostTable, security: SecurityClass) -> float:
    return session_time(table, security, SessionSpec.basic(security))


@dataclass(frozen=True)
class UsageProfile:
    sessions_per_day: float = 1.0
    ans_bytes: int = 3_000_000
    heart_rate_bpm: float = 60.0
    heartbeat_uj: float = 20.0
    duty_cycle: float = 0.05
    battery_capacity_j: float = 2.8 * 3600 * 1.0  # 1 Ah cell at 2.8 V

    def __post_init__(self) -> None:
        if self.sessions_per_day < 0 or self.ans_bytes < 0:
            raise ValueError("usage profile values must be non-negative")


def daily_energy(table: CostTable, security: SecurityClass, profile: UsageProfile = UsageProfile()) -> float:
    """Total implant energy per day in joules."""
    stim = profile.heartbeat_uj * profile.heart_rate_bpm * 60 * 24 / 1e6
    baseline = table.medical_baseline_j * profile.duty_cycle / table.duty_cycle
    session = session_energy(table, security, SessionSpec.for_volume(security, profile.ans_bytes)) / 1e6
    return baseline + stim + profile.sessions_per_day * session


def overhead_percent(table: CostTable, security: SecurityClass, profile: UsageProfile = UsageProfile()) -> float:
    base = daily_energy(table, SecurityClass.NONE, profile)
    return (daily_energy(table, security, profile) / base - 1) * 100


def estimate_lifetime(table: CostTable, profile: UsageProfile, security: SecurityClass) -> float:
    """Battery lifetime in days."""
    if profile.battery_capacity_j <= 0:
        raise ValueError("battery capacity must be positive")
    return profile.battery_capacity_j / daily_energy(table, security, profile)


# Session frequencies spanning a daily to a weekly two-minute session.
SESSION_RATES = tuple(1 / d for d in range(1, 8))
# Implantable-grade cell sizes (Ah at 2.8 V nominal).
BATTERY_AH = (0.5, 1.0, 1.5, 2.0, 2.5)


@dataclass(frozen=True)
class LifetimeSpread:
    security: SecurityClass
    battery_ah: float
    days_min: float
    days_median: float
    days_max: float


def lifetime_spread(
    table: CostTable,
    security: SecurityClass,
    battery_ah: float,
    rates: Iterable[float] = SESSION_RATES,
    volts: float = 2.8,
) -> LifetimeSpread:
    days = [
        estimate_lifetime(table, UsageProfile(sessions_per_day=r, battery_capacity_j=battery_ah * 3600 * volts), security)
        for r in rates
    ]
    return LifetimeSpread(SecurityClass(security), battery_ah, min(days), statistics.median(days), max(days))


# -- runtime ledger ---------------------------------------------------------------------


@dataclass(frozen=True)
class Spend:
    step: str
    source: str  # "battery" or "harvested"
    uj: float
    at_ms: int


@dataclass
class EnergyLedger:
    """Battery plus a small harvested-energy pool refilled by the reader's RF field."""

    battery_capacity_j: float = 2.8 * 3600
    zpd: bool = True
    harvest_capacity_uj: float = 120.0
    harvest_rate_uj_per_s: float = 24.0
    harvested_uj: float = 120.0
    last_refill_ms: int = 0
    log: list = field(default_factory=list)

    def refill(self, now_ms: int) -> None:
        if now_ms > self.last_refill_ms:
            gained = self.harvest_rate_uj_per_s * (now_ms - self.last_refill_ms) / 1e3
            self.harvested_uj = min(self.harvest_capacity_uj, self.harvested_uj + gained)
            self.last_refill_ms = now_ms

    def reserve(self, uj: float, now_ms: int) -> bool:
        """Set aside harvested energy for a whole authentication attempt."""
        if not self.zpd:
            return True
        self.refill(now_ms)
        if self.harvested_uj < uj:
            return False
        self.harvested_uj -= uj
        return True

    def spend(self, step: str, uj: float, pre_auth: bool, now_ms: int) -> str:
        source = "harvested" if (pre_auth and self.zpd) else "battery"
        self.log.append(Spend(step, source, uj, now_ms))
        return source

    def spent(self, source: str) -> float:
        return math.fsum(s.uj for s in self.log if s.source == source)

    @property
    def battery_spent_uj(self) -> float:
        return self.spent("battery")

    @property
    def battery_remaining_j(self) -> float:
        return self.battery_capacity_j - self.battery_spent_uj / 1e6
