"""Print session, daily and lifetime figures, and the battery-DoS flood comparison."""

import argparse

from imdsec.energy import default_cost_table
from imdsec.protocol import EcosystemConfig, build_ecosystem
from imdsec.report import ALL_CLASSES, energy_rows, energy_text, lifetime_rows, lifetime_text
from imdsec.scenarios import battery_dos_flood


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--flood", type=int, default=10_000, help="bogus authentication attempts (0 to skip)")
    args = ap.parse_args()
    table = default_cost_table()
    print(energy_text(energy_rows(table, ALL_CLASSES)))
    print(lifetime_text(lifetime_rows(table, ALL_CLASSES)))
    if args.flood:
        for zpd in (True, False):
            eco = build_ecosystem(EcosystemConfig(zpd=zpd, keep_trace=False))
            rep = battery_dos_flood(eco, args.flood)
            print(
                f"flood of {rep.attempts} with zpd={'on ' if zpd else 'off'}: battery -{rep.battery_delta_j:.6f} J"
                f"  harvested {rep.harvested_uj:.0f} uJ  expected -{rep.expected_battery_delta_j:.6f} J"
            )


if __name__ == "__main__":
    main()
