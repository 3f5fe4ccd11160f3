"""Fit the per-step cost table to the published aggregates and write it as JSON."""

import argparse
from pathlib import Path

from imdsec.energy import SECURE_CLASSES, SecurityClass, auth_energy, calibrate, protocol_delay, session_energy, SessionSpec

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "imdsec" / "data" / "cost_table.json"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    table = calibrate()
    table.dump(args.out)
    for sec in (SecurityClass.NONE, *SECURE_CLASSES):
        print(
            f"{sec.value:10s} session {session_energy(table, sec, SessionSpec.basic(sec)):8.1f} uJ"
            f"  auth {auth_energy(table, sec):7.1f} uJ  delay {protocol_delay(table, sec):6.2f} ms"
        )
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
