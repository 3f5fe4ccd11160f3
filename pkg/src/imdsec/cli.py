"""Command-line entry point: scenario runs, energy reports and flash audits.

Exit codes: 0 when every verdict is as expected, 1 on a deviation (or a
failed audit), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import wire
from .crypto import CryptoSuite
from .energy import COST_TABLE_ENV, CostTable, SecurityClass, default_cost_table
from .entities import ReaderKind
from .flash import audit_dump
from .protocol import EcosystemConfig
from .report import (
    ALL_CLASSES,
    audit_text,
    energy_rows,
    energy_text,
    lifetime_rows,
    lifetime_text,
    to_csv,
)
from .netsim import HOUR_MS
from .scenarios import MODES, SCENARIOS, Scenario, ScenarioResult, get_scenario, run_scenario

EXIT_OK, EXIT_DEVIATION, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    scenario: str = "S1"
    seed: int = 0
    mode: Optional[str] = None  # overrides the scenario's own mode
    cost_table: Optional[str] = None
    security: str = SecurityClass.HW_AES.value
    tl_ms: int = 8 * HOUR_MS
    flash_bytes: int = 32 * 1024
    nr_offline: bool = True  # offline flavor the reader asks for
    implant_nr_offline: bool = True  # deployment flag burnt into the implant
    format: str = "text"
    all_scenarios: bool = False
    out: Optional[str] = None
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def validate(self) -> None:
        if self.mode is not None and self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        try:
            SecurityClass(self.security)
        except ValueError:
            raise ConfigError(f"unknown implementation class {self.security!r}") from None
        if self.format not in ("text", "csv"):
            raise ConfigError("format must be text or csv")
        if self.tl_ms <= 0 or self.flash_bytes < 72:
            raise ConfigError("T_L must be positive and flash must hold one 72-byte record")


def load_table(path: Optional[str]) -> CostTable:
    try:
        return CostTable.load(path) if path else default_cost_table()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        src = path or f"${COST_TABLE_ENV}"
        raise ConfigError(f"cannot load cost table from {src}: {exc}") from exc


def load_scenario(name: str) -> Scenario:
    if name.endswith(".json"):
        try:
            data = json.loads(Path(name).read_text())
            data["reader_kind"] = ReaderKind(data.get("reader_kind", "valid"))
            return Scenario(**data)
        except (OSError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad scenario file {name}: {exc}") from exc
    try:
        return get_scenario(name)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None


def ecosystem_config(cfg: RunConfig, table: CostTable) -> EcosystemConfig:
    return EcosystemConfig(
        security=SecurityClass(cfg.security),
        token_lifetime_ms=cfg.tl_ms,
        flash_bytes=cfg.flash_bytes,
        nr_offline=cfg.implant_nr_offline,
        cost_table=table,
    )


def scenario_for(cfg: RunConfig, base: Scenario) -> Scenario:
    s = base
    if cfg.mode is not None:
        s = s.variant(mode=cfg.mode)
    if not cfg.nr_offline:
        s = s.variant(offline_nr=False)
    return s


def _job(args: tuple[Scenario, int, EcosystemConfig]) -> ScenarioResult:
    s, seed, base = args
    return run_scenario(s, seed, base)


def execute_run(cfg: RunConfig) -> list[ScenarioResult]:
    """Library form of ``imdsec run``; one result per (scenario, seed)."""
    cfg.validate()
    table = load_table(cfg.cost_table)
    base = ecosystem_config(cfg, table)
    names = list(SCENARIOS) if cfg.all_scenarios else [cfg.scenario]
    seeds = cfg.seeds or [cfg.seed]
    jobs = [(scenario_for(cfg, load_scenario(n)), seed, base) for n in names for seed in seeds]
    if len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


@dataclass(frozen=True)
class VerdictRow:
    scenario: str
    seed: int
    mode: str
    expected: str
    outcome: str
    verdict: str
    executed: int
    records: int


def verdict_rows(results: Sequence[ScenarioResult]) -> list[VerdictRow]:
    return [
        VerdictRow(
            r.scenario.name, r.seed, r.scenario.mode, r.scenario.expected, r.outcome,
            "asExpected" if r.as_expected else "deviation", len(r.executed), len(r.audit),
        )
        for r in results
    ]


def _verdict_text(rows: Sequence[VerdictRow]) -> str:
    return "".join(
        f"{r.scenario:20s} seed={r.seed:<4d} {r.mode:8s} expected={r.expected:28s} got={r.outcome:28s} {r.verdict}\n"
        for r in rows
    )


def _emit(text: str, out: Optional[Path], name: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        (out / name).write_text(text)


def cmd_run(cfg: RunConfig) -> int:
    results = execute_run(cfg)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            stem = f"{r.scenario.name}-seed{r.seed}"
            (out / f"{stem}.trace").write_text(r.trace)
            (out / f"{stem}.flash").write_bytes(r.flash_dump)
            (out / f"{stem}.cert").write_bytes(r.card_cert)
    rows = verdict_rows(results)
    csv_mode = cfg.format == "csv"
    _emit(to_csv(rows) if csv_mode else _verdict_text(rows), out, "verdict." + ("csv" if csv_mode else "txt"))
    table = load_table(cfg.cost_table)
    erows = energy_rows(table, [SecurityClass(cfg.security)])
    _emit(to_csv(erows) if csv_mode else energy_text(erows), out, "energy." + ("csv" if csv_mode else "txt"))
    for r in results:
        if not r.as_expected:
            sys.stderr.write(f"{r.scenario.name} seed {r.seed}: {r.verdict} {r.detail}\n")
    return EXIT_OK if all(r.as_expected for r in results) else EXIT_DEVIATION


def cmd_energy_report(table: CostTable, classes: Sequence[SecurityClass], fmt: str) -> str:
    erows = energy_rows(table, classes)
    lrows = lifetime_rows(table, classes)
    if fmt == "csv":
        return to_csv(erows) + "\n" + to_csv(lrows)
    return energy_text(erows) + "\n" + lifetime_text(lrows)


def cmd_audit_flash(dump: bytes, cert_bytes: bytes, fmt: str = "text") -> tuple[str, bool]:
    if len(cert_bytes) != wire.CERT.size:
        raise ConfigError(f"certificate file must be {wire.CERT.size} bytes, got {len(cert_bytes)}")
    cert, _ = wire.CERT.unpack(cert_bytes, 0)
    entries = audit_dump(dump, cert.public_key, CryptoSuite(), card_id=cert.subject)
    ok = all(e.ok for e in entries)
    if fmt == "csv":
        lines = ["index,ok,detail,card,card_nonce,reader_nonce,cmd"]
        for e in entries:
            r = e.record
            link = (r.card_id.name, f"{r.card_nonce.value:08x}", f"{r.reader_nonce.value:08x}", r.cmd.kind.name) if r else ("",) * 4
            lines.append(",".join([str(e.index), str(e.ok), e.detail, *link]))
        return "\n".join(lines) + "\n", ok
    return audit_text(entries), ok


# -- argparse ----------------------------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imdsec", description="Implant security protocol simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and report its verdict")
    run.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    run.add_argument("--scenario", help="S1..S7, a named variant, or a scenario JSON file")
    run.add_argument("--seed", type=int)
    run.add_argument("--seeds", type=int, nargs="+", help="run every scenario once per seed")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--cost-table", dest="cost_table")
    run.add_argument("--class", dest="security", choices=[c.value for c in SecurityClass])
    run.add_argument("--tl-ms", dest="tl_ms", type=int)
    run.add_argument("--flash-bytes", dest="flash_bytes", type=int)
    run.add_argument("--nr-offline", dest="nr_offline", type=_bool, help="offline sessions carry card signatures")
    run.add_argument("--implant-nr-offline", dest="implant_nr_offline", type=_bool,
                     help="implant deployed to require signatures offline")
    run.add_argument("--format", choices=("text", "csv"))
    run.add_argument("--all-scenarios", dest="all_scenarios", action="store_true", default=None)
    run.add_argument("--out", help="directory for trace, verdict and energy files")

    er = sub.add_parser("energy-report", help="session, daily and lifetime figures per class")
    er.add_argument("--cost-table", dest="cost_table")
    er.add_argument("--class", dest="security", action="append", choices=[c.value for c in SecurityClass])
    er.add_argument("--format", choices=("text", "csv"), default="text")

    au = sub.add_parser("audit-flash", help="verify a signature-flash dump against a card certificate")
    au.add_argument("dump")
    au.add_argument("cert")
    au.add_argument("--format", choices=("text", "csv"), default="text")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "run":
            cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
            overrides = {k: v for k, v in vars(args).items() if k in {f.name for f in fields(RunConfig)} and v is not None}
            cfg = replace(cfg, **overrides)
            return cmd_run(cfg)
        if args.command == "energy-report":
            classes = [SecurityClass(c) for c in args.security] if args.security else list(ALL_CLASSES)
            sys.stdout.write(cmd_energy_report(load_table(args.cost_table), classes, args.format))
            return EXIT_OK
        if args.command == "audit-flash":
            try:
                dump, cert = Path(args.dump).read_bytes(), Path(args.cert).read_bytes()
            except OSError as exc:
                raise ConfigError(str(exc)) from exc
            text, ok = cmd_audit_flash(dump, cert, args.format)
            sys.stdout.write(text)
            return EXIT_OK if ok else EXIT_DEVIATION
    except ConfigError as exc:
        sys.stderr.write(f"imdsec: {exc}\n")
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
