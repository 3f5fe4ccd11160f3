"""Plain-text and CSV reports shared by the CLI and the library API."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

from .energy import (
    BATTERY_AH,
    SECURE_CLASSES,
    CostTable,
    SecurityClass,
    SessionSpec,
    UsageProfile,
    auth_energy,
    daily_energy,
    lifetime_spread,
    overhead_percent,
    protocol_delay,
    session_energy,
)
from .flash import AuditEntry

ALL_CLASSES = (SecurityClass.NONE, *SECURE_CLASSES)


@dataclass(frozen=True)
class EnergyRow:
    security: str
    session_uj: float
    delay_ms: float
    daily_j: float
    overhead_pct: float
    e_auth_uj: float


@dataclass(frozen=True)
class LifetimeRow:
    security: str
    battery_ah: float
    days_min: float
    days_median: float
    days_max: float


def energy_rows(
    table: CostTable, classes: Iterable[SecurityClass] = ALL_CLASSES, profile: UsageProfile = UsageProfile()
) -> list[EnergyRow]:
    return [
        EnergyRow(
            security=c.value,
            session_uj=session_energy(table, c, SessionSpec.basic(c)),
            delay_ms=protocol_delay(table, c),
            daily_j=daily_energy(table, c, profile),
            overhead_pct=overhead_percent(table, c, profile),
            e_auth_uj=auth_energy(table, c),
        )
        for c in map(SecurityClass, classes)
    ]


def lifetime_rows(
    table: CostTable, classes: Iterable[SecurityClass] = ALL_CLASSES, batteries: Sequence[float] = BATTERY_AH
) -> list[LifetimeRow]:
    rows = []
    for c in map(SecurityClass, classes):
        for ah in batteries:
            s = lifetime_spread(table, c, ah)
            rows.append(LifetimeRow(c.value, ah, s.days_min, s.days_median, s.days_max))
    return rows


def to_csv(rows: Sequence) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[f.name for f in fields(rows[0])], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()


def from_csv(text: str, row_type: type) -> list:
    """Inverse of :func:`to_csv` for the numeric row types above."""
    types = {f.name: f.type for f in fields(row_type)}
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(row_type(**{k: (v if types[k] in (str, "str") else float(v)) for k, v in rec.items()}))
    return out


def energy_text(rows: Sequence[EnergyRow]) -> str:
    lines = [f"{'class':10s} {'session uJ':>11s} {'delay ms':>9s} {'daily J':>8s} {'overhead %':>11s} {'E_auth uJ':>10s}"]
    for r in rows:
        lines.append(
            f"{r.security:10s} {r.session_uj:11.2f} {r.delay_ms:9.2f} {r.daily_j:8.2f} {r.overhead_pct:11.2f} {r.e_auth_uj:10.1f}"
        )
    return "\n".join(lines) + "\n"


def lifetime_text(rows: Sequence[LifetimeRow]) -> str:
    lines = [f"{'class':10s} {'Ah':>4s} {'min d':>8s} {'median d':>9s} {'max d':>8s}"]
    for r in rows:
        lines.append(f"{r.security:10s} {r.battery_ah:4.1f} {r.days_min:8.0f} {r.days_median:9.0f} {r.days_max:8.0f}")
    return "\n".join(lines) + "\n"


def audit_text(entries: Sequence[AuditEntry]) -> str:
    lines = []
    for e in entries:
        if e.record is None:
            lines.append(f"{e.index:4d} {'FAIL':4s} {e.detail}")
            continue
        r = e.record
        lines.append(
            f"{e.index:4d} {'ok' if e.ok else 'FAIL':4s} {e.detail:18s} card={r.card_id.name} "
            f"N_C={r.card_nonce.value:08x} N_R={r.reader_nonce.value:08x} cmd={r.cmd.kind.name}({r.cmd.payload})"
        )
    return "".join(line + "\n" for line in lines)
