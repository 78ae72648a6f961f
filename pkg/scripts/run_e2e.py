"""Full synthetic experiment: data, training, attribution, reports and the acceptance checks.

    python scripts/run_e2e.py --out runs/e2e --workers 4
"""

import argparse
import logging
import sys
import time

from viba.config import load_config
from viba.experiment import run_e2e


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = load_config(args.config, {"seed": str(args.seed), "workers": str(args.workers)})
    t0 = time.perf_counter()
    code, criteria = run_e2e(args.out, cfg)
    for c in criteria:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value} (need {c.threshold})")
    print(f"exit {code} after {time.perf_counter() - t0:.0f} s; reports in {args.out}/reports")
    return code


if __name__ == "__main__":
    sys.exit(main())
