"""Randomized adversary traces against each protocol phase; prints violation counts per check."""

import argparse
import sys
import time

from imdsec.properties import PHASE_NAMES, PHASES, run_phase


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--traces", type=int, default=1000)
    ap.add_argument("--phase", choices=PHASES, action="append")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()
    total = 0
    for phase in args.phase or PHASES:
        t0 = time.perf_counter()
        rep = run_phase(phase, args.traces, workers=args.workers)
        total += len(rep.violations)
        counts = " ".join(f"{k}={v}" for k, v in rep.by_check().items())
        print(f"phase {phase} ({PHASE_NAMES[phase]}): {rep.traces} traces {time.perf_counter() - t0:.1f}s  {counts}")
        for v in rep.violations[:10]:
            print(f"  seed {v.seed}: {v.check}: {v.detail}")
    return 1 if total else 0


if __name__ == "__main__":
    sys.exit(main())
