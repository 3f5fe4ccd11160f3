"""Run the attack-scenario matrix (and optionally the named variants) over several seeds."""

import argparse
import sys

from imdsec.scenarios import SCENARIOS, VARIANTS, run_scenario


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", action="store_true", help="also run the precondition variants")
    args = ap.parse_args()
    names = list(SCENARIOS) + (list(VARIANTS) if args.variants else [])
    bad = 0
    for name in names:
        for seed in args.seeds:
            r = run_scenario(name, seed)
            bad += not r.as_expected
            print(f"{name:22s} seed={seed:<3d} expected={r.scenario.expected:28s} got={r.outcome:28s} {r.verdict}")
    print(f"{bad} deviation(s)")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
