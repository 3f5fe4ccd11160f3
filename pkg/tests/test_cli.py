"""CLI behavior: exit codes, parity with the library API, CSV output and flash audits."""

import json
import subprocess
import sys

import pytest

from imdsec import cli
from imdsec.energy import BATTERY_AH, SecurityClass, default_cost_table
from imdsec.report import EnergyRow, LifetimeRow, energy_rows, from_csv, lifetime_rows, to_csv


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_default_scenario(capsys):
    code, out, _ = run(["run", "--scenario", "S1", "--seed", "2"], capsys)
    assert code == cli.EXIT_OK
    assert "asExpected" in out and "S1" in out


def test_text_matches_library(capsys):
    code, out, _ = run(["run", "--scenario", "S3", "--seed", "4"], capsys)
    rows = cli.verdict_rows(cli.execute_run(cli.RunConfig(scenario="S3", seed=4)))
    erows = energy_rows(default_cost_table(), [SecurityClass.HW_AES])
    assert out == cli._verdict_text(rows) + cli.energy_text(erows)


def test_csv_matches_library(capsys):
    code, out, _ = run(["run", "--scenario", "S6-wrong-pin", "--seed", "1", "--format", "csv"], capsys)
    assert code == 0
    rows = cli.verdict_rows(cli.execute_run(cli.RunConfig(scenario="S6-wrong-pin", seed=1)))
    assert out.startswith(to_csv(rows))


def test_deviation_exit_code(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"name": "S2-wishful", "user": "attacker", "reader_kind": "stolen", "expected": "success"}))
    code, out, err = run(["run", "--scenario", str(path)], capsys)
    assert code == cli.EXIT_DEVIATION
    assert "deviation" in out and "S2-wishful" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--scenario", "S99"],
        ["run", "--tl-ms", "0"],
        ["run", "--flash-bytes", "10"],
        ["run", "--nr-offline", "maybe"],
        ["run", "--cost-table", "/nonexistent.json"],
        ["launch"],
        [],
    ],
)
def test_config_errors(argv, capsys):
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_config_file_and_override(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenario": "S2", "seed": 3, "format": "csv"}))
    code, out, _ = run(["run", "--config", str(cfg), "--seed", "5"], capsys)
    assert code == 0
    assert "S2,5," in out
    cfg.write_text(json.dumps({"scenery": "S2"}))
    assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_CONFIG


def test_mode_override(capsys):
    code, out, _ = run(["run", "--scenario", "S5", "--mode", "offline", "--seed", "0"], capsys)
    assert "offline" in out and "detectable-in-audit" in out


def test_nr_offline_flags(capsys):
    code, out, _ = run(["run", "--scenario", "S6", "--mode", "offline", "--nr-offline", "false",
                        "--implant-nr-offline", "true", "--format", "csv"], capsys)
    assert "reject(nr-required)" in out
    code, out, _ = run(["run", "--scenario", "S6", "--mode", "offline", "--nr-offline", "false",
                        "--implant-nr-offline", "false", "--format", "csv"], capsys)
    assert "S6,0,offline,success,success,asExpected" in out


def test_out_dir_and_audit(capsys, tmp_path):
    out = tmp_path / "s3"
    assert cli.main(["run", "--scenario", "S3", "--seed", "1", "--out", str(out)]) == 0
    capsys.readouterr()
    assert (out / "verdict.txt").read_text().count("asExpected") == 1
    assert (out / "S3-seed1.trace").read_text()
    dump, cert = out / "S3-seed1.flash", out / "S3-seed1.cert"
    code, text, _ = run(["audit-flash", str(dump), str(cert)], capsys)
    assert code == cli.EXIT_DEVIATION and "FAIL" in text
    code, text, _ = run(["audit-flash", str(dump), str(cert), "--format", "csv"], capsys)
    assert text.splitlines()[0].startswith("index,ok")


def test_audit_clean_dump(capsys, tmp_path):
    out = tmp_path / "s1"
    cli.main(["run", "--scenario", "S1", "--out", str(out)])
    capsys.readouterr()
    code, text, _ = run(["audit-flash", str(out / "S1-seed0.flash"), str(out / "S1-seed0.cert")], capsys)
    assert code == 0 and "FAIL" not in text and text.count("ok") == 1


def test_audit_bad_cert(capsys, tmp_path):
    (tmp_path / "c").write_bytes(b"short")
    (tmp_path / "d").write_bytes(b"")
    assert cli.main(["audit-flash", str(tmp_path / "d"), str(tmp_path / "c")]) == cli.EXIT_CONFIG
    assert cli.main(["audit-flash", str(tmp_path / "missing"), str(tmp_path / "c")]) == cli.EXIT_CONFIG


def test_energy_report_single_class(capsys):
    code, out, _ = run(["energy-report", "--class", "sw-speck"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert sum(line.startswith("sw-speck") for line in lines) == 1 + len(BATTERY_AH)
    assert not any(line.startswith("hw-aes") for line in lines)


def test_energy_csv_roundtrip(capsys):
    code, out, _ = run(["energy-report", "--format", "csv"], capsys)
    e_text, l_text = out.split("\n\n")
    table = default_cost_table()
    assert from_csv(e_text, EnergyRow) == energy_rows(table)
    assert from_csv(l_text + "\n", LifetimeRow) == lifetime_rows(table)


def test_cost_table_override(capsys, tmp_path):
    path = tmp_path / "costs.json"
    default_cost_table().dump(path)
    assert cli.main(["energy-report", "--cost-table", str(path)]) == 0
    path.write_text("{not json")
    assert cli.main(["energy-report", "--cost-table", str(path)]) == cli.EXIT_CONFIG


def test_multiple_seeds_all_scenarios(capsys):
    code, out, _ = run(["run", "--all-scenarios", "--seeds", "0", "1", "--format", "csv"], capsys)
    assert code == 0
    assert out.count("asExpected") == 14


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "imdsec.cli", "run", "--scenario", "S7"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "reject(cert-invalid)" in proc.stdout
